// Command-line front end: psmf --config run.json [--seed N] [--output DIR] [--sweep K]

#include "psmf/run.hpp"

#include "CLI11.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <iostream>
#include <thread>
#include <vector>

namespace {

unsigned sweep_threads(std::size_t jobs) {
  unsigned cap = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("PSMF_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v >= 1) cap = static_cast<unsigned>(v);
    } catch (const std::exception&) {
      std::cerr << "ignoring invalid PSMF_THREADS='" << env << "'\n";
    }
  }
  return static_cast<unsigned>(std::min<std::size_t>(cap, jobs));
}

void report_config_error(const std::filesystem::path& dir, const psmf::Error& err) {
  psmf::json summary;
  summary["status"] = "error";
  summary["error"] = {{"kind", psmf::to_string(err.kind())}, {"message", err.what()}};
  if (const auto* ce = dynamic_cast<const psmf::ConfigError*>(&err)) summary["error"]["field"] = ce->field();
  try {
    std::filesystem::create_directories(dir);
    psmf::detail::write_summary(dir, summary);
  } catch (const std::exception&) {
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Probabilistic sequential matrix factorization experiments"};
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output;
  std::size_t sweep = 0;
  app.add_option("--config", config_path, "JSON run configuration")->required();
  app.add_option("--seed", seed, "override the configured seed");
  app.add_option("--output", output, "override the output directory");
  app.add_option("--sweep", sweep, "run this many consecutive seeds in parallel, one subdirectory each");
  CLI11_PARSE(app, argc, argv);

  psmf::RunConfig cfg;
  try {
    cfg = psmf::load_config(config_path);
  } catch (const psmf::Error& err) {
    std::cerr << "error: " << err.what() << '\n';
    report_config_error(output ? std::filesystem::path(*output) : std::filesystem::path("out"), err);
    return psmf::exit_config;
  }
  if (seed) cfg.seed = *seed;
  if (output) cfg.output_dir = *output;

  if (sweep == 0) {
    const int code = psmf::run_experiment(cfg);
    if (code != psmf::exit_ok) std::cerr << "error: see " << (cfg.output_dir / "summary.json").string() << '\n';
    return code;
  }

  std::vector<psmf::RunConfig> jobs;
  for (std::size_t i = 0; i < sweep; ++i) {
    psmf::RunConfig job = cfg;
    job.seed = cfg.seed + i;
    job.output_dir = cfg.output_dir / ("seed_" + std::to_string(job.seed));
    jobs.push_back(std::move(job));
  }
  std::vector<int> codes(jobs.size(), psmf::exit_ok);
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < sweep_threads(jobs.size()); ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < jobs.size(); i = next++) codes[i] = psmf::run_experiment(jobs[i]);
    });
  for (auto& th : pool) th.join();

  int worst = psmf::exit_ok;
  for (std::size_t i = 0; i < jobs.size(); ++i)
    if (codes[i] != psmf::exit_ok) {
      std::cerr << "seed " << jobs[i].seed << " failed (exit " << codes[i] << ")\n";
      worst = std::max(worst, codes[i]);
    }
  return worst;
}
