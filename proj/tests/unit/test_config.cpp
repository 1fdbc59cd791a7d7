#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <string>

#include "cimp/config.hpp"
#include "cimp/error.hpp"

using namespace cimp;

namespace {

// Message of the Config error `text` raises; fails the test otherwise.
std::string config_error(const std::string& text, const ConfigOverrides& o = {}) {
  try {
    parse_config(text, o);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Config);
    return e.what();
  }
  FAIL("expected a config error for: " << text);
  return {};
}

bool mentions(const std::string& message, const std::string& needle) {
  return message.find(needle) != std::string::npos;
}

}  // namespace

TEST_CASE("empty config yields the tabled defaults") {
  const ExperimentConfig c = parse_config("");
  CHECK(c.profile == "paper-supp-t2");
  CHECK(c.engine.strategy == Strategy::Full);
  CHECK(c.seeds == std::vector<std::uint64_t>{0});
  REQUIRE(c.engine.phases.size() == 4);
  for (const auto& p : c.engine.phases) {
    CHECK(p.optim.batch_size == 40);
    CHECK(p.optim.lr == 0.01);
    CHECK(p.centroid_momentum == 0.99);
  }
  CHECK(c.engine.phases[3].loss.alpha_dist == 5.0);
  CHECK_FALSE(c.engine.phases[0].synthesis.has_value());
  CHECK(c.to_json() == default_config().to_json());
}

TEST_CASE("unknown keys are rejected with their dotted path") {
  CHECK(mentions(config_error("learning_rate = 0.1"), "learning_rate: unknown key"));
  CHECK(mentions(config_error("[data.desk]\nclasess = 5"), "data.desk.clasess: unknown key"));
  CHECK(mentions(config_error("[train]\nlr = 0.1\nwarmup = 3"), "train.warmup: unknown key"));
  CHECK(mentions(config_error("[phase.2.synthesis]\nsteps = 10\nfoo = 1"), "phase.2.synthesis.foo: unknown key"));
  CHECK(mentions(config_error("[phase.2]\noptim = 1"), "phase.2.optim: unknown key"));
  CHECK(mentions(config_error("[nonsense]\na = 1"), "nonsense: unknown key"));
}

TEST_CASE("schema violations name the field") {
  CHECK(mentions(config_error("[train]\nlr = \"fast\""), "train.lr"));
  CHECK(mentions(config_error("[train]\nlr = -0.1"), "train.lr"));
  CHECK(mentions(config_error("[train]\nepochs = 1.5"), "train.epochs"));
  CHECK(mentions(config_error("[synthesis]\ninit_mode = \"zeros\""), "synthesis.init_mode"));
  CHECK(mentions(config_error("[model]\nkernel = 4"), "model.kernel"));
  CHECK(mentions(config_error("[model]\nblock_widths = [8, 16]"), "model.block_widths"));
  CHECK(mentions(config_error("[data.split]\ntrain = 0.5\nval = 0.2\ntest = 0.2"), "data.split"));
  CHECK(mentions(config_error("seeds = [-1]"), "seeds"));
  CHECK(mentions(config_error("seeds = []"), "seeds"));
  CHECK(mentions(config_error("strategy = \"greedy\""), "strategy"));
  CHECK(mentions(config_error("profile = \"fast\""), "profile"));
  CHECK(mentions(config_error("[phase.1.synthesis]\nsteps = 3"), "phase.1.synthesis"));
  CHECK(mentions(config_error("[phase.x.train]\nlr = 0.1"), "phase.x"));
  CHECK(mentions(config_error("[data]\nmanifest = \"m.csv\"\n[data.desk]\nclasses = 3"), "data.desk"));
  CHECK(mentions(config_error("strategy = \"finetune\"\nablate = \"no-margin\""), "ablate"));
  CHECK(mentions(config_error("ablate = [\"no-margin\", \"no-everything\"]"), "ablate"));
}

TEST_CASE("syntax errors report a position") {
  const std::string m = config_error("[train\nlr = 0.1");
  CHECK(mentions(m, "line 1"));
}

TEST_CASE("section settings apply per phase") {
  const ExperimentConfig c = parse_config(R"(
[train]
epochs = 7
[synthesis]
steps = 11
[phase.3.train]
epochs = 2
[phase.3.synthesis]
alpha_bn = 0.5
)");
  CHECK(c.engine.phases[0].optim.epochs == 7);
  CHECK(c.engine.phases[1].optim.epochs == 7);
  CHECK(c.engine.phases[2].optim.epochs == 2);
  CHECK(c.engine.phases[3].optim.epochs == 7);
  CHECK(c.engine.phases[1].synthesis->steps == 11);
  CHECK(c.engine.phases[2].synthesis->steps == 11);
  CHECK(c.engine.phases[2].synthesis->alpha_bn == 0.5);
  CHECK(c.engine.phases[1].synthesis->alpha_bn == 0.2);

  // A phase past the profile extends it with copies of the last one.
  const ExperimentConfig longer = parse_config("[phase.6.train]\nepochs = 9");
  REQUIRE(longer.engine.phases.size() == 6);
  CHECK(longer.engine.phases[4].optim.epochs == longer.engine.phases[3].optim.epochs);
  CHECK(longer.engine.phases[5].optim.epochs == 9);
}

TEST_CASE("command-line overrides") {
  const std::string text = "profile = \"paper-supp-t2\"\nstrategy = \"full\"\nseeds = [4]\nout = \"x\"\n"
                           "[phase.2.synthesis]\nbeta2 = 0.5\n";
  ConfigOverrides o;
  o.profile = "sane";
  o.strategy = Strategy::Finetune;
  o.seeds = std::vector<std::uint64_t>{1, 2};
  o.out = "elsewhere";
  const ExperimentConfig c = parse_config(text, o);
  CHECK(c.profile == "sane");
  // The profile comes first; explicit keys in the file still win over it.
  CHECK(c.engine.phases[1].synthesis->beta2 == 0.5);
  CHECK(c.engine.phases[2].synthesis->beta2 == 0.999);
  CHECK(c.engine.strategy == Strategy::Finetune);
  CHECK(c.seeds == std::vector<std::uint64_t>{1, 2});
  CHECK(c.out == "elsewhere");

  ConfigOverrides ab;
  ab.ablation = Ablation::parse("no-contrastive,noise-init");
  const ExperimentConfig d = parse_config("", ab);
  CHECK(d.engine.ablation.no_contrastive);
  CHECK(d.engine.ablation.noise_init);
  CHECK_FALSE(d.engine.ablation.no_margin);

  ConfigOverrides bad;
  bad.strategy = Strategy::Oracle;
  CHECK(mentions(config_error("ablate = \"no-margin\"", bad), "ablate"));
}

TEST_CASE("seed lists") {
  CHECK(parse_seed_list("1,2,3") == std::vector<std::uint64_t>{1, 2, 3});
  CHECK(parse_seed_list("42") == std::vector<std::uint64_t>{42});
  for (const char* bad : {"", "1,,2", "-1", "a", "1,2,", "1.5"}) {
    CAPTURE(bad);
    CHECK_THROWS_AS(parse_seed_list(bad), Error);
  }
}

TEST_CASE("the TOML snapshot reads back into the same config") {
  const std::string texts[] = {
      "",
      R"(profile = "sane"
strategy = "full"
ablate = ["no-margin", "noise-init"]
seeds = [3, 9]
threads = 2
out = "runs/x"
[data.desk]
classes = 6
per_class = 17
noise = 0.123456789
seed = 77
[data.split]
train = 0.6
val = 0.2
test = 0.2
seed = 5
[schedule]
order = [[4, 0], [1], [5, 2], [3]]
[model]
stem_width = 5
block_widths = [6, 7, 9]
final_relu = true
eta = 12.5
[engine]
replay_quota = 13
distill_targets = "synthesized"
clamp_pixels = false
[phase.3.train]
lr = 0.0123
[phase.2.synthesis]
init_mode = "gaussian-noise"
init_jitter_sigma = 0.3
)",
      "strategy = \"oracle\"\n[schedule]\nshuffle_seed = 12\n[data]\nformat = \"pgm\"\n",
  };
  for (const auto& text : texts) {
    const ExperimentConfig c = parse_config(text);
    const ExperimentConfig back = parse_config(c.to_toml());
    CHECK(back.to_json() == c.to_json());
    CHECK(back.out == c.out);
    CHECK(back.to_toml() == c.to_toml());
  }
}

TEST_CASE("manifest paths resolve against the config file") {
  const auto dir = std::filesystem::temp_directory_path() / "cimp_test_config";
  std::filesystem::create_directories(dir);
  std::ofstream(dir / "exp.toml") << "[data]\nmanifest = \"data/manifest.csv\"\n";
  const ExperimentConfig c = load_config(dir / "exp.toml");
  REQUIRE(c.data.manifest.has_value());
  CHECK(*c.data.manifest == dir / "data/manifest.csv");
  std::filesystem::remove_all(dir);

  try {
    load_config(dir / "missing.toml");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Config);
  }
}

TEST_CASE("engine config takes geometry and seed from the data") {
  const ExperimentConfig c = parse_config("[data.desk]\nheight = 12\nwidth = 10\nper_class = 4\n[model]\neta = 7.0");
  const DatasetManifest m = materialize_data(c.data);
  const EngineConfig e = engine_for(c, m, 99);
  CHECK(e.arch.height == 12);
  CHECK(e.arch.width == 10);
  CHECK(e.arch.channels == 1);
  CHECK(e.seed == 99);
  for (const auto& p : e.phases) CHECK(p.loss.eta == 7.0);
}
