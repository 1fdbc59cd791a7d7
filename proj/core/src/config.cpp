#include "cimp/config.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <toml.hpp>

#include "cimp/error.hpp"

namespace cimp {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

[[noreturn]] void schema_error(const std::string& path, const std::string& what) {
  fail(ErrorKind::Config, path + ": " + what);
}

// One TOML table plus the keys read from it; finish() rejects the rest.
class Section {
 public:
  Section(const toml::table* table, std::string path) : table_(table), path_(std::move(path)) {}

  bool present() const { return table_ != nullptr; }
  std::string key_path(std::string_view key) const {
    return path_.empty() ? std::string(key) : path_ + "." + std::string(key);
  }

  const toml::node* take(std::string_view key) {
    if (table_ == nullptr) return nullptr;
    seen_.insert(std::string(key));
    return table_->get(key);
  }

  Section sub(std::string_view key) {
    const toml::node* n = take(key);
    if (n == nullptr) return Section(nullptr, key_path(key));
    if (!n->is_table()) schema_error(key_path(key), "expected a table");
    return Section(n->as_table(), key_path(key));
  }

  void real(std::string_view key, double& dst, double lo = -kInf, double hi = kInf, bool open_lo = false) {
    const toml::node* n = take(key);
    if (n == nullptr) return;
    double v = 0.0;
    if (auto f = n->value_exact<double>()) {
      v = *f;
    } else if (auto i = n->value_exact<std::int64_t>()) {
      v = static_cast<double>(*i);
    } else {
      schema_error(key_path(key), "expected a number");
    }
    if (!std::isfinite(v) || v < lo || v > hi || (open_lo && v == lo)) {
      std::ostringstream msg;
      msg << "value " << v << " outside " << (open_lo ? "(" : "[") << lo << ", " << hi << "]";
      schema_error(key_path(key), msg.str());
    }
    dst = v;
  }

  void integer(std::string_view key, int& dst, std::int64_t lo, std::int64_t hi = std::numeric_limits<int>::max()) {
    const toml::node* n = take(key);
    if (n == nullptr) return;
    auto i = n->value_exact<std::int64_t>();
    if (!i) schema_error(key_path(key), "expected an integer");
    if (*i < lo || *i > hi) {
      schema_error(key_path(key), "value " + std::to_string(*i) + " outside [" + std::to_string(lo) + ", " +
                                      std::to_string(hi) + "]");
    }
    dst = static_cast<int>(*i);
  }

  void seed(std::string_view key, std::uint64_t& dst) {
    const toml::node* n = take(key);
    if (n == nullptr) return;
    dst = to_seed(*n, key_path(key));
  }

  void boolean(std::string_view key, bool& dst) {
    const toml::node* n = take(key);
    if (n == nullptr) return;
    auto b = n->value_exact<bool>();
    if (!b) schema_error(key_path(key), "expected true or false");
    dst = *b;
  }

  std::optional<std::string> string(std::string_view key) {
    const toml::node* n = take(key);
    if (n == nullptr) return std::nullopt;
    auto s = n->value_exact<std::string>();
    if (!s) schema_error(key_path(key), "expected a string");
    return *s;
  }

  // Runs `parse` on a string value and prefixes its errors with the key path.
  template <typename T, typename F>
  void parsed(std::string_view key, T& dst, F parse) {
    const auto s = string(key);
    if (!s) return;
    try {
      dst = parse(*s);
    } catch (const Error& e) {
      schema_error(key_path(key), e.what());
    }
  }

  std::optional<std::vector<int>> int_list(std::string_view key, const toml::node* n = nullptr) {
    if (n == nullptr) n = take(key);
    if (n == nullptr) return std::nullopt;
    if (!n->is_array()) schema_error(key_path(key), "expected an array of integers");
    std::vector<int> out;
    for (const auto& el : *n->as_array()) {
      auto i = el.value_exact<std::int64_t>();
      if (!i || *i < 0 || *i > std::numeric_limits<int>::max())
        schema_error(key_path(key), "expected non-negative integers");
      out.push_back(static_cast<int>(*i));
    }
    return out;
  }

  std::optional<std::vector<std::vector<int>>> int_lists(std::string_view key) {
    const toml::node* n = take(key);
    if (n == nullptr) return std::nullopt;
    if (!n->is_array()) schema_error(key_path(key), "expected an array of integer arrays");
    std::vector<std::vector<int>> out;
    for (const auto& el : *n->as_array()) out.push_back(*int_list(key, &el));
    return out;
  }

  std::vector<std::string> keys() const {
    std::vector<std::string> out;
    if (table_ != nullptr)
      for (const auto& [k, v] : *table_) out.emplace_back(k.str());
    return out;
  }

  void finish() const {
    if (table_ == nullptr) return;
    for (const auto& [k, v] : *table_) {
      if (seen_.count(std::string(k.str())) == 0) schema_error(key_path(k.str()), "unknown key");
    }
  }

  static std::uint64_t to_seed(const toml::node& n, const std::string& path) {
    auto i = n.value_exact<std::int64_t>();
    if (!i || *i < 0) schema_error(path, "expected a non-negative integer seed");
    return static_cast<std::uint64_t>(*i);
  }

 private:
  const toml::table* table_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_train(Section& s, PhaseConfig& p) {
  s.real("margin", p.loss.margin, 0.0, 2.0);
  s.real("tau", p.loss.tau, 0.0);
  s.real("alpha_dist", p.loss.alpha_dist, 0.0);
  s.real("alpha_margin", p.loss.alpha_margin, 0.0);
  s.real("alpha_contras", p.loss.alpha_contras, 0.0);
  s.real("distill_temperature", p.loss.distill_temperature, 0.0, kInf, true);
  s.boolean("logit_distillation", p.loss.logit_distillation);
  s.real("centroid_momentum", p.centroid_momentum, 0.0, 1.0);
  s.real("lr", p.optim.lr, 0.0, kInf, true);
  s.real("momentum", p.optim.momentum, 0.0, 0.999999);
  s.real("weight_decay", p.optim.weight_decay, 0.0);
  s.integer("epochs", p.optim.epochs, 1);
  s.integer("batch_size", p.optim.batch_size, 2);
  s.finish();
}

void read_synthesis(Section& s, SynthesisConfig& c) {
  s.real("alpha_tv", c.alpha_tv, 0.0);
  s.real("alpha_l2", c.alpha_l2, 0.0);
  s.real("alpha_bn", c.alpha_bn, 0.0);
  s.real("alpha_reg_total", c.alpha_reg_total, 0.0);
  s.real("lr", c.lr, 0.0, kInf, true);
  s.real("beta1", c.beta1, 0.0, 0.999999);
  s.real("beta2", c.beta2, 0.0, 0.999999);
  s.real("adam_epsilon", c.adam_epsilon, 0.0, kInf, true);
  s.integer("steps", c.steps, 0);
  s.integer("batch_size", c.batch_size, 1);
  s.parsed("init_mode", c.init_mode, [](const std::string& v) { return parse_init_mode(v); });
  s.real("init_jitter_sigma", c.init_jitter_sigma, 0.0);
  s.real("norm_epsilon", c.norm_epsilon, 0.0);
  s.finish();
}

void apply_overrides(ExperimentConfig& cfg, const ConfigOverrides& o) {
  if (o.strategy) cfg.engine.strategy = *o.strategy;
  if (o.ablation) cfg.engine.ablation = *o.ablation;
  if (o.seeds) cfg.seeds = *o.seeds;
  if (o.out) cfg.out = *o.out;
}

void validate(const ExperimentConfig& cfg) {
  require(!cfg.seeds.empty(), ErrorKind::Config, "seeds: at least one seed is required");
  require(cfg.engine.strategy == Strategy::Full || !cfg.engine.ablation.any(), ErrorKind::Config,
          "ablate: ablations only apply to the full strategy");
  cfg.data.split.validate();
  if (!cfg.data.manifest) cfg.data.desk.validate();
  cfg.engine.validate();
}

}  // namespace

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json data_j;
  if (data.manifest) {
    data_j["manifest"] = data.manifest->generic_string();
  } else {
    data_j["desk"] = {{"classes", data.desk.classes}, {"per_class", data.desk.per_class},
                      {"groups", data.desk.groups},   {"height", data.desk.height},
                      {"width", data.desk.width},     {"noise", data.desk.noise},
                      {"seed", data.desk.seed}};
  }
  data_j["split"] = {{"train", data.split.train}, {"val", data.split.val}, {"test", data.split.test},
                     {"seed", data.split.seed}};
  nlohmann::json sched = {{"initial_classes", schedule.initial_classes},
                          {"increment", schedule.increment},
                          {"tasks", schedule.tasks}};
  if (schedule.explicit_tasks) sched["order"] = *schedule.explicit_tasks;
  if (schedule.shuffle_seed) sched["shuffle_seed"] = *schedule.shuffle_seed;
  nlohmann::json engine_j = engine.to_json();
  engine_j.erase("seed");
  return {{"profile", profile},
          {"data", data_j},
          {"schedule", sched},
          {"engine", engine_j},
          {"seeds", seeds},
          {"write_impressions", write_impressions},
          {"write_step_metrics", write_step_metrics}};
}

namespace {

toml::array toml_ints(const auto& values) {
  toml::array a;
  for (auto v : values) a.push_back(static_cast<std::int64_t>(v));
  return a;
}

toml::table train_table(const PhaseConfig& p) {
  return toml::table{{"margin", p.loss.margin},
                     {"tau", p.loss.tau},
                     {"alpha_dist", p.loss.alpha_dist},
                     {"alpha_margin", p.loss.alpha_margin},
                     {"alpha_contras", p.loss.alpha_contras},
                     {"distill_temperature", p.loss.distill_temperature},
                     {"logit_distillation", p.loss.logit_distillation},
                     {"centroid_momentum", p.centroid_momentum},
                     {"lr", p.optim.lr},
                     {"momentum", p.optim.momentum},
                     {"weight_decay", p.optim.weight_decay},
                     {"epochs", p.optim.epochs},
                     {"batch_size", p.optim.batch_size}};
}

toml::table synthesis_table(const SynthesisConfig& c) {
  return toml::table{{"alpha_tv", c.alpha_tv},
                     {"alpha_l2", c.alpha_l2},
                     {"alpha_bn", c.alpha_bn},
                     {"alpha_reg_total", c.alpha_reg_total},
                     {"lr", c.lr},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"adam_epsilon", c.adam_epsilon},
                     {"steps", c.steps},
                     {"batch_size", c.batch_size},
                     {"init_mode", std::string(to_string(c.init_mode))},
                     {"init_jitter_sigma", c.init_jitter_sigma},
                     {"norm_epsilon", c.norm_epsilon}};
}

}  // namespace

std::string ExperimentConfig::to_toml() const {
  toml::table root{{"profile", profile},
                   {"strategy", std::string(to_string(engine.strategy))},
                   {"ablate", engine.ablation.to_string()},
                   {"seeds", toml_ints(seeds)},
                   {"threads", engine.threads},
                   {"out", out.generic_string()}};

  toml::table data_t{{"format", std::string(to_string(data.format))}};
  if (data.manifest) {
    data_t.insert("manifest", data.manifest->generic_string());
  } else {
    data_t.insert("desk", toml::table{{"classes", data.desk.classes},
                                      {"per_class", data.desk.per_class},
                                      {"groups", data.desk.groups},
                                      {"height", data.desk.height},
                                      {"width", data.desk.width},
                                      {"noise", data.desk.noise},
                                      {"seed", static_cast<std::int64_t>(data.desk.seed)}});
  }
  data_t.insert("split", toml::table{{"train", data.split.train},
                                     {"val", data.split.val},
                                     {"test", data.split.test},
                                     {"seed", static_cast<std::int64_t>(data.split.seed)}});
  root.insert("data", std::move(data_t));

  toml::table sched{{"initial_classes", schedule.initial_classes},
                    {"increment", schedule.increment},
                    {"tasks", schedule.tasks}};
  if (schedule.explicit_tasks) {
    toml::array order;
    for (const auto& t : *schedule.explicit_tasks) order.push_back(toml_ints(t));
    sched.insert("order", std::move(order));
  }
  if (schedule.shuffle_seed) sched.insert("shuffle_seed", static_cast<std::int64_t>(*schedule.shuffle_seed));
  root.insert("schedule", std::move(sched));

  const auto& a = engine.arch;
  root.insert("model", toml::table{{"stem_width", a.stem_width},
                                   {"block_widths", toml_ints(a.block_widths)},
                                   {"block_strides", toml_ints(a.block_strides)},
                                   {"kernel", a.kernel},
                                   {"final_relu", a.final_relu},
                                   {"bn_eps", a.bn_eps},
                                   {"bn_momentum", a.bn_momentum},
                                   {"eta", engine.eta}});
  root.insert("engine", toml::table{{"replay", engine.replay},
                                    {"transductive_target", engine.transductive_target},
                                    {"distill_targets", std::string(to_string(engine.distill_targets))},
                                    {"clamp_pixels", engine.clamp_pixels},
                                    {"replay_quota", engine.replay_quota_override},
                                    {"write_impressions", write_impressions},
                                    {"write_step_metrics", write_step_metrics}});

  toml::table phases;
  for (std::size_t i = 0; i < engine.phases.size(); ++i) {
    toml::table one{{"train", train_table(engine.phases[i])}};
    if (engine.phases[i].synthesis) one.insert("synthesis", synthesis_table(*engine.phases[i].synthesis));
    phases.insert(std::to_string(i + 1), std::move(one));
  }
  root.insert("phase", std::move(phases));

  std::ostringstream os;
  os << "# Resolved configuration snapshot; every value is explicit.\n" << root << '\n';
  return os.str();
}

ExperimentConfig parse_config(std::string_view text, const ConfigOverrides& overrides,
                              const std::filesystem::path& base_dir) {
  toml::table root;
  try {
    root = toml::parse(text);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << "line " << e.source().begin.line << ", column " << e.source().begin.column << ": "
        << e.description();
    fail(ErrorKind::Config, "TOML syntax error at " + msg.str());
  }
  Section top(&root, "");
  ExperimentConfig cfg;

  cfg.profile = top.string("profile").value_or(cfg.profile);
  if (overrides.profile) cfg.profile = *overrides.profile;
  try {
    cfg.engine.phases = make_profile(cfg.profile);
  } catch (const Error& e) {
    schema_error("profile", e.what());
  }

  top.parsed("strategy", cfg.engine.strategy, [](const std::string& v) { return parse_strategy(v); });
  if (const toml::node* n = top.take("ablate")) {
    std::string joined;
    if (auto s = n->value_exact<std::string>()) {
      joined = *s;
    } else if (n->is_array()) {
      for (const auto& el : *n->as_array()) {
        auto s2 = el.value_exact<std::string>();
        if (!s2) schema_error("ablate", "expected strings");
        joined += (joined.empty() ? "" : ",") + *s2;
      }
    } else {
      schema_error("ablate", "expected a string or an array of strings");
    }
    try {
      cfg.engine.ablation = Ablation::parse(joined);
    } catch (const Error& e) {
      schema_error("ablate", e.what());
    }
  }
  if (const toml::node* n = top.take("seeds")) {
    if (!n->is_array()) schema_error("seeds", "expected an array of integers");
    cfg.seeds.clear();
    for (const auto& el : *n->as_array()) cfg.seeds.push_back(Section::to_seed(el, "seeds"));
  }
  top.integer("threads", cfg.engine.threads, 1, 1024);
  if (auto out = top.string("out")) cfg.out = *out;

  {
    Section data = top.sub("data");
    if (auto m = data.string("manifest")) {
      std::filesystem::path p(*m);
      cfg.data.manifest = p.is_relative() && !base_dir.empty() ? base_dir / p : p;
    }
    data.parsed("format", cfg.data.format, [](const std::string& v) { return parse_image_format(v); });
    Section desk = data.sub("desk");
    if (desk.present() && cfg.data.manifest) schema_error("data.desk", "cannot be combined with data.manifest");
    desk.integer("classes", cfg.data.desk.classes, 2, 8);
    desk.integer("per_class", cfg.data.desk.per_class, 1);
    desk.integer("groups", cfg.data.desk.groups, 3);
    desk.integer("height", cfg.data.desk.height, 8, 512);
    desk.integer("width", cfg.data.desk.width, 8, 512);
    desk.real("noise", cfg.data.desk.noise, 0.0, 1.0);
    desk.seed("seed", cfg.data.desk.seed);
    desk.finish();
    Section split = data.sub("split");
    split.real("train", cfg.data.split.train, 0.0, 1.0, true);
    split.real("val", cfg.data.split.val, 0.0, 1.0);
    split.real("test", cfg.data.split.test, 0.0, 1.0, true);
    split.seed("seed", cfg.data.split.seed);
    split.finish();
    if (split.present() && std::abs(cfg.data.split.train + cfg.data.split.val + cfg.data.split.test - 1.0) > 1e-9)
      schema_error("data.split", "fractions must sum to 1");
    data.finish();
  }
  {
    Section s = top.sub("schedule");
    s.integer("initial_classes", cfg.schedule.initial_classes, 2);
    s.integer("increment", cfg.schedule.increment, 1);
    s.integer("tasks", cfg.schedule.tasks, 1);
    if (auto order = s.int_lists("order")) cfg.schedule.explicit_tasks = *order;
    if (const toml::node* n = s.take("shuffle_seed"))
      cfg.schedule.shuffle_seed = Section::to_seed(*n, "schedule.shuffle_seed");
    s.finish();
  }
  {
    Section m = top.sub("model");
    auto& a = cfg.engine.arch;
    m.integer("stem_width", a.stem_width, 1, 4096);
    if (auto w = m.int_list("block_widths")) {
      if (w->size() != 3 || std::find(w->begin(), w->end(), 0) != w->end())
        schema_error("model.block_widths", "expected three positive integers");
      std::copy(w->begin(), w->end(), a.block_widths.begin());
    }
    if (auto st = m.int_list("block_strides")) {
      if (st->size() != 3 || std::find(st->begin(), st->end(), 0) != st->end())
        schema_error("model.block_strides", "expected three positive integers");
      std::copy(st->begin(), st->end(), a.block_strides.begin());
    }
    m.integer("kernel", a.kernel, 1, 15);
    if (a.kernel % 2 == 0) schema_error("model.kernel", "kernel size must be odd");
    m.boolean("final_relu", a.final_relu);
    m.real("bn_eps", a.bn_eps, 0.0, 1.0, true);
    m.real("bn_momentum", a.bn_momentum, 0.0, 1.0);
    m.real("eta", cfg.engine.eta, 0.0, kInf, true);
    m.finish();
  }
  {
    Section e = top.sub("engine");
    e.boolean("replay", cfg.engine.replay);
    e.boolean("transductive_target", cfg.engine.transductive_target);
    e.parsed("distill_targets", cfg.engine.distill_targets,
             [](const std::string& v) { return parse_distill_targets(v); });
    e.boolean("clamp_pixels", cfg.engine.clamp_pixels);
    e.integer("replay_quota", cfg.engine.replay_quota_override, 0);
    e.boolean("write_impressions", cfg.write_impressions);
    e.boolean("write_step_metrics", cfg.write_step_metrics);
    e.finish();
  }

  auto& phases = cfg.engine.phases;
  // [train] and [synthesis] apply to every phase that has the stage.
  if (top.sub("train").present()) {
    const toml::table* tbl = root.get("train")->as_table();
    for (auto& p : phases) {
      Section each(tbl, "train");
      read_train(each, p);
    }
  }
  if (top.sub("synthesis").present()) {
    const toml::table* tbl = root.get("synthesis")->as_table();
    SynthesisConfig scratch;
    for (auto& p : phases) {
      Section each(tbl, "synthesis");
      read_synthesis(each, p.synthesis ? *p.synthesis : scratch);
    }
  }
  {
    Section ph = top.sub("phase");
    for (const auto& key : ph.keys()) {
      int index = 0;
      try {
        std::size_t used = 0;
        index = std::stoi(key, &used);
        if (used != key.size()) throw std::invalid_argument(key);
      } catch (const std::exception&) {
        schema_error(ph.key_path(key), "phase tables are keyed by phase number (1, 2, ...)");
      }
      if (index < 1 || index > 64) schema_error(ph.key_path(key), "phase number out of range");
      while (static_cast<int>(phases.size()) < index) phases.push_back(phases.back());
      PhaseConfig& target = phases[static_cast<std::size_t>(index - 1)];
      Section one = ph.sub(key);
      Section t = one.sub("train");
      if (t.present()) read_train(t, target);
      Section s = one.sub("synthesis");
      if (s.present()) {
        if (!target.synthesis) schema_error("phase." + key + ".synthesis", "phase 1 has no synthesis stage");
        read_synthesis(s, *target.synthesis);
      }
      one.finish();
    }
    ph.finish();
  }
  top.finish();

  apply_overrides(cfg, overrides);
  try {
    validate(cfg);
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::Config) throw;
    fail(ErrorKind::Config, std::string("invalid configuration: ") + e.what());
  }
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path, const ConfigOverrides& overrides) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::Config, "cannot read config file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), overrides, path.parent_path());
}

ExperimentConfig default_config(const ConfigOverrides& overrides) { return parse_config("", overrides); }

std::vector<std::uint64_t> parse_seed_list(std::string_view text) {
  std::vector<std::uint64_t> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t end = std::min(text.find(',', start), text.size());
    const std::string tok(text.substr(start, end - start));
    std::size_t used = 0;
    std::uint64_t v = 0;
    try {
      v = std::stoull(tok, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    require(!tok.empty() && used == tok.size() && tok.front() != '-', ErrorKind::Config,
            "seeds: '" + tok + "' is not a non-negative integer");
    out.push_back(v);
    start = end + 1;
  }
  return out;
}

DatasetManifest materialize_data(const DataSource& source) {
  if (source.manifest) return load_manifest(*source.manifest, source.split);
  return make_desk_dataset(source.desk);
}

EngineConfig engine_for(const ExperimentConfig& cfg, const DatasetManifest& data, std::uint64_t seed) {
  EngineConfig e = cfg.engine;
  e.arch.height = data.height;
  e.arch.width = data.width;
  e.arch.channels = data.channels;
  e.seed = seed;
  for (auto& p : e.phases) p.loss.eta = e.eta;
  return e;
}

}  // namespace cimp
