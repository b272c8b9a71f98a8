#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "fellerlab/acceptance.hpp"
#include "fellerlab/config.hpp"
#include "fellerlab/runner.hpp"

namespace {

using fellerlab::cli::RunOptions;

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<unsigned> threads;
  bool force = false;
};

void add_run_flags(CLI::App* sub, Flags& f)
{
  sub->add_option("--config", f.config, "experiment TOML file")->required();
  sub->add_option("--seed", f.seed, "override the config seed");
  sub->add_option("--out", f.out, "output directory (default: output.dir or runs/<experiment>)");
  sub->add_option("--threads", f.threads, "worker threads (0: all cores)");
  sub->add_flag("--force", f.force, "replace an existing output directory");
}

int run_experiment(const std::string& subcommand, const Flags& f)
{
  try {
    const auto cfg = fellerlab::ExperimentConfig::from_file(f.config);
    RunOptions opt;
    opt.subcommand = subcommand;
    opt.seed = f.seed;
    opt.threads = f.threads;
    opt.force = f.force;
    if (f.out) opt.out = *f.out;
    const auto s = fellerlab::cli::run_config(cfg, opt);
    for (const auto& c : s.checks) std::cout << (c.pass ? "PASS " : "FAIL ") << c.name << ": " << c.detail << '\n';
    if (s.exit_code != 0) std::cerr << s.message << '\n';
    std::cout << "artifacts in " << s.out_dir.string() << '\n';
    return s.exit_code;
  } catch (const fellerlab::Error& e) {
    std::cerr << e.what() << '\n';
    return e.code() == fellerlab::ErrorCode::config_error ? fellerlab::cli::exit_config : fellerlab::cli::exit_failure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return fellerlab::cli::exit_failure;
  }
}

int verify(const std::vector<std::string>& only, bool list, std::uint64_t seed, unsigned threads, double gamma_factor)
{
  namespace acc = fellerlab::acceptance;
  if (list) {
    for (const auto& c : acc::criteria()) std::cout << c.id << "  " << c.title << "  (budget " << c.budget << " s)\n";
    return 0;
  }
  acc::Options opt;
  opt.seed = seed;
  opt.threads = threads;
  opt.gamma_rate_factor = gamma_factor;
  nlohmann::ordered_json summary = nlohmann::ordered_json::array();
  bool all = true;
  for (const auto& c : acc::criteria()) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto r = acc::run(c, opt);
    all = all && r.pass;
    std::cerr << (r.pass ? "PASS " : "FAIL ") << r.id << " " << r.title << " (" << r.seconds << " s): " << r.detail << '\n';
    summary.push_back({{"id", r.id}, {"pass", r.pass}, {"seconds", r.seconds}, {"budget", r.budget}, {"detail", r.detail}});
  }
  std::cout << summary.dump(2) << '\n';
  return all ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv)
{
  CLI::App app{"Multitype Feller diffusion laboratory"};
  app.require_subcommand(1);
  app.set_version_flag("--version", fellerlab::library_version);

  Flags flags;
  for (const auto& [name, help] : std::vector<std::pair<std::string, std::string>>{
           {"spectral", "Perron data and matrix exponentials"},
           {"cumulant", "cumulant tables and closed-form checks"},
           {"laws", "long-time limit laws"},
           {"simulate", "unconditioned simulation, weight martingale, explosion monitor"},
           {"condition", "conditioned sampling and the decomposable suite"},
           {"interchange", "iterated limits in t and theta"},
           {"run", "any experiment"}})
    add_run_flags(app.add_subcommand(name, help), flags);

  auto* ver = app.add_subcommand("verify", "run the acceptance criteria");
  std::vector<std::string> only;
  bool list = false;
  std::uint64_t seed = fellerlab::acceptance::Options{}.seed;
  unsigned threads = 0;
  double gamma_factor = 1.0;
  ver->add_option("--only", only, "criterion ids, e.g. A3 A5");
  ver->add_flag("--list", list, "list the criteria without running them");
  ver->add_option("--seed", seed, "base seed");
  ver->add_option("--threads", threads, "worker threads (0: all cores)");
  ver->add_option("--perturb-gamma-rate", gamma_factor, "multiply the A3 reference rate (negative control)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : fellerlab::cli::exit_config;
  }

  if (ver->parsed()) return verify(only, list, seed, threads, gamma_factor);
  for (auto* sub : app.get_subcommands()) return run_experiment(sub->get_name(), flags);
  return fellerlab::cli::exit_config;
}
