#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "fellerlab/runner.hpp"

using namespace fellerlab;
namespace fs = std::filesystem;

#ifndef FELLERLAB_TOOL
#define FELLERLAB_TOOL "fellerlab"
#endif
#ifndef FELLERLAB_CONFIG_DIR
#define FELLERLAB_CONFIG_DIR "configs"
#endif

namespace {

class TempDir {
 public:
  TempDir()
  {
    std::random_device rd;
    path_ = fs::temp_directory_path() / ("fellerlab-test-" + std::to_string(rd()) + std::to_string(rd()));
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::string slurp(const fs::path& p)
{
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::string without_volatile(const std::string& manifest) { return manifest.substr(0, manifest.find("[volatile]")); }

void expect_config_error(const std::string& text)
{
  try {
    ExperimentConfig::from_string(text).model();
    ADD_FAILURE() << "accepted: " << text;
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::config_error) << e.what();
  }
}

int run_tool(const std::string& args, const fs::path& stdout_file = "/dev/null")
{
  const std::string cmd = std::string("\"") + FELLERLAB_TOOL + "\" " + args + " > \"" + stdout_file.string() + "\" 2>/dev/null";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path config(const std::string& name) { return fs::path(FELLERLAB_CONFIG_DIR) / name; }

}  // namespace

TEST(Sha256, KnownVectors)
{
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST(Config, RejectsMalformedInput)
{
  expect_config_error("");
  expect_config_error("seed = 3");
  expect_config_error("experiment = \"no-such-thing\"");
  expect_config_error("experiment = 4");
  expect_config_error("experiment = \"spectral\"\n[model\n");
  expect_config_error("experiment = \"spectral\"\n[model]\nD = [[1.0, 0.0], [0.0]]\nc = 1.0");
  expect_config_error("experiment = \"spectral\"\n[model]\nD = [[-1.0, 0.0]]\nc = 1.0");
  expect_config_error("experiment = \"spectral\"\n[model]\nD = [[-1.0, -1.0], [0.0, -1.0]]\nc = 1.0");
  expect_config_error("experiment = \"spectral\"\n[model]\nD = [[-1.0]]\nc = \"two\"");
  expect_config_error("experiment = \"spectral\"\n[model]\nD = [[-1.0]]");
}

TEST(Config, ValuesGridsAndInfinity)
{
  const auto cfg = ExperimentConfig::from_string(R"(experiment = "interchange"
theta = "inf"
n = 7
times = { from = 0.0, to = 2.0, n = 5 }
list = [1, 2.5]
[model]
D = [[-1.0, 0.5], [0.0, -2.0]]
c = 1.5
)");
  EXPECT_EQ(cfg.experiment(), "interchange");
  EXPECT_TRUE(std::isinf(cfg.extended_real("theta")));
  EXPECT_EQ(cfg.integer("n"), 7);
  EXPECT_EQ(cfg.grid("times"), (std::vector<double>{0.0, 0.5, 1.0, 1.5, 2.0}));
  EXPECT_EQ(cfg.reals("list"), (std::vector<double>{1.0, 2.5}));
  EXPECT_EQ(cfg.real("missing", 3.0), 3.0);
  EXPECT_EQ(cfg.model().c(), 1.5);
  EXPECT_EQ(cfg.model().D()(0, 1), 0.5);
  EXPECT_EQ(cfg.hash(), sha256_hex(cfg.text()));
  EXPECT_THROW(cfg.integer("theta"), Error);
  EXPECT_THROW(cfg.grid("n"), Error);
}

TEST(RunConfig, SpectralWritesArtifactsAndPasses)
{
  TempDir tmp;
  cli::RunOptions opt;
  opt.out = tmp.path() / "spectral";
  opt.subcommand = "spectral";
  const auto s = cli::run_config(ExperimentConfig::from_file(config("spectral.toml")), opt);
  EXPECT_EQ(s.exit_code, cli::exit_ok) << s.message;
  for (const char* f : {"config.toml", "result.json", "checks.json", "manifest.toml", "matrix_exp.csv"})
    EXPECT_TRUE(fs::exists(*opt.out / f)) << f;
  const auto result = io::json::parse(slurp(*opt.out / "result.json"));
  EXPECT_EQ(result["result"]["spectral"]["mu"].get<double>(), 0.0);
  EXPECT_NEAR(result["result"]["spectral"]["xi"][0].get<double>(), 0.5, 1e-12);
  const std::string manifest = slurp(*opt.out / "manifest.toml");
  EXPECT_NE(manifest.find(sha256_hex(slurp(config("spectral.toml")))), std::string::npos);
  EXPECT_NE(manifest.find(sha256_hex(slurp(*opt.out / "result.json"))), std::string::npos);
}

TEST(RunConfig, InterchangeIsOneQuarterAtOne)
{
  TempDir tmp;
  cli::RunOptions opt;
  opt.out = tmp.path() / "interchange";
  const auto s = cli::run_config(ExperimentConfig::from_file(config("interchange.toml")), opt);
  EXPECT_EQ(s.exit_code, cli::exit_ok) << s.message;
  const auto result = io::json::parse(slurp(*opt.out / "result.json"));
  EXPECT_NEAR(result["result"]["t_then_theta"][0].get<double>(), 0.25, 1e-6);
  EXPECT_NEAR(result["result"]["theta_then_t"][0].get<double>(), 0.25, 1e-6);
}

TEST(RunConfig, RefusesToOverwriteWithoutForce)
{
  TempDir tmp;
  cli::RunOptions opt;
  opt.out = tmp.path() / "out";
  const auto cfg = ExperimentConfig::from_file(config("spectral.toml"));
  cli::run_config(cfg, opt);
  try {
    cli::run_config(cfg, opt);
    ADD_FAILURE() << "overwrote an existing directory";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::config_error);
  }
  opt.force = true;
  EXPECT_EQ(cli::run_config(cfg, opt).exit_code, cli::exit_ok);
}

TEST(RunConfig, SubcommandMismatchIsConfigError)
{
  TempDir tmp;
  cli::RunOptions opt;
  opt.out = tmp.path() / "out";
  opt.subcommand = "laws";
  EXPECT_THROW(cli::run_config(ExperimentConfig::from_file(config("spectral.toml")), opt), Error);
  EXPECT_FALSE(fs::exists(*opt.out));
}

TEST(RunConfig, FailedExpectationGivesExitOne)
{
  TempDir tmp;
  cli::RunOptions opt;
  opt.out = tmp.path() / "out";
  std::string text = slurp(config("interchange.toml"));
  text.replace(text.find("t_then_theta = [0.25"), 20, "t_then_theta = [0.26");
  const auto s = cli::run_config(ExperimentConfig::from_string(text), opt);
  EXPECT_EQ(s.exit_code, cli::exit_failure);
  EXPECT_NE(s.message.find("assertion failed"), std::string::npos);
}

TEST(RunConfig, RerunsAreByteIdenticalAcrossThreadCounts)
{
  TempDir tmp;
  std::string text = slurp(config("simulate.toml"));
  text.replace(text.find("n_paths = 20000"), 15, "n_paths = 2000");
  const auto cfg = ExperimentConfig::from_string(text);
  cli::RunOptions a, b;
  a.out = tmp.path() / "a";
  a.threads = 1;
  b.out = tmp.path() / "b";
  b.threads = 2;
  cli::run_config(cfg, a);
  cli::run_config(cfg, b);
  std::size_t compared = 0;
  for (const auto& entry : fs::directory_iterator(*a.out)) {
    const auto name = entry.path().filename();
    const std::string x = slurp(entry.path()), y = slurp(*b.out / name);
    if (name == "manifest.toml") {
      EXPECT_EQ(without_volatile(x), without_volatile(y));
      EXPECT_NE(x, y);
    } else {
      EXPECT_EQ(x, y) << name;
    }
    ++compared;
  }
  EXPECT_GE(compared, 6u);
}

TEST(Io, EnsembleBinaryRoundTrip)
{
  TempDir tmp;
  const auto model = validate_model(Matrix::Constant(1, 1, -0.5), 1.0);
  SimulationOptions o;
  o.dt = 0.1;
  o.threads = 1;
  o.record_times = {0.5};
  const auto ens = simulate(model, Vector::Ones(1), 1.0, 50, 3, o);
  io::write_ensemble_binary(ens, tmp.path() / "ens");
  const auto cols = io::read_columns(tmp.path() / "ens.bin", 50);
  // Three recorded times of one coordinate, then weights, then absorption times.
  ASSERT_EQ(cols.size(), 5u);
  for (std::size_t p = 0; p < 50; ++p) {
    EXPECT_EQ(cols[0][p], 1.0);
    EXPECT_EQ(cols[1][p], ens.paths[p].state(1)(0));
    EXPECT_EQ(cols[2][p], ens.paths[p].state(2)(0));
    EXPECT_EQ(cols[3][p], 1.0);
  }
  const auto side = io::json::parse(slurp(tmp.path() / "ens.json"));
  EXPECT_FALSE(side.empty());
}

TEST(Tool, ExitCodes)
{
  TempDir tmp;
  const fs::path empty = tmp.path() / "empty.toml";
  std::ofstream(empty) << "";
  EXPECT_EQ(run_tool("run --config \"" + empty.string() + "\" --out \"" + (tmp.path() / "x").string() + "\""), 2);
  EXPECT_EQ(run_tool("run"), 2);
  EXPECT_EQ(run_tool(""), 2);
  EXPECT_EQ(run_tool("laws --config \"" + config("spectral.toml").string() + "\" --out \"" + (tmp.path() / "y").string() + "\""), 2);
  const std::string out = (tmp.path() / "z").string();
  EXPECT_EQ(run_tool("spectral --config \"" + config("spectral.toml").string() + "\" --out \"" + out + "\""), 0);
  EXPECT_EQ(run_tool("spectral --config \"" + config("spectral.toml").string() + "\" --out \"" + out + "\""), 2);
  EXPECT_EQ(run_tool("spectral --force --config \"" + config("spectral.toml").string() + "\" --out \"" + out + "\""), 0);
  EXPECT_EQ(run_tool("verify --list"), 0);
}

// Negative control: a 10% error in the reference gamma rate must be caught.
TEST(Tool, PerturbedGammaRateFailsA3)
{
  TempDir tmp;
  const fs::path out = tmp.path() / "verify.json";
  EXPECT_EQ(run_tool("verify --only A3 --perturb-gamma-rate 1.1", out), 1);
  const auto summary = io::json::parse(slurp(out));
  ASSERT_EQ(summary.size(), 1u);
  EXPECT_EQ(summary[0]["id"], "A3");
  EXPECT_FALSE(summary[0]["pass"].get<bool>());
}
