#include "fedsim/harness/config.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#if defined(__GLIBC__)
#include <malloc.h>
#endif
#include <sstream>
#include <thread>

#include "fedsim/errors.hpp"

namespace fedsim::harness {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

std::vector<std::string_view> split_on(std::string_view s, std::string_view separators) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto pos = s.find_first_of(separators, start);
    const auto end = pos == std::string_view::npos ? s.size() : pos;
    auto part = trim(s.substr(start, end - start));
    if (!part.empty()) parts.push_back(part);
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return parts;
}

std::uint64_t to_u64(const std::string& key, std::string_view v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size())
    throw ConfigError(key, fmt::format("expected a non-negative integer, got '{}'", v));
  return out;
}

double to_double(const std::string& key, std::string_view v) {
  double out = 0.0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || p != v.data() + v.size()) throw ConfigError(key, fmt::format("expected a number, got '{}'", v));
  return out;
}

bool to_bool(const std::string& key, std::string_view v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(key, fmt::format("expected true or false, got '{}'", v));
}

template <class T, class F>
std::string join(const std::vector<T>& xs, std::string_view sep, F&& f) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) out += sep;
    out += f(xs[i]);
  }
  return out;
}

// Same message under a different field name.
ConfigError requalify(const ConfigError& e, const std::string& field) {
  std::string_view what = e.what();
  const auto prefix = e.field() + ": ";
  if (what.substr(0, prefix.size()) == prefix) what.remove_prefix(prefix.size());
  return ConfigError(field, std::string(what));
}

std::string num(double v) { return fmt::format("{}", v); }

struct Field {
  std::function<void(ExperimentConfig&, const std::string& key, std::string_view value)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <class M>
Field size_field(M member) {
  return {[member](ExperimentConfig& c, const std::string& k, std::string_view v) { member(c) = to_u64(k, v); },
          [member](const ExperimentConfig& c) { return std::to_string(member(c)); }};
}

template <class M>
Field double_field(M member) {
  return {[member](ExperimentConfig& c, const std::string& k, std::string_view v) { member(c) = to_double(k, v); },
          [member](const ExperimentConfig& c) { return num(member(c)); }};
}

template <class M>
Field bool_field(M member) {
  return {[member](ExperimentConfig& c, const std::string& k, std::string_view v) { member(c) = to_bool(k, v); },
          [member](const ExperimentConfig& c) { return std::string(member(c) ? "true" : "false"); }};
}

template <class M>
Field path_field(M member) {
  return {[member](ExperimentConfig& c, const std::string&, std::string_view v) { member(c) = std::string(v); },
          [member](const ExperimentConfig& c) { return member(c).string(); }};
}

// Ordered: serialization follows this table.
const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = [] {
    std::vector<std::pair<std::string, Field>> t;
    t.emplace_back("experiment.preset",
                   Field{[](ExperimentConfig& c, const std::string&, std::string_view v) { c.preset = std::string(v); },
                         [](const ExperimentConfig& c) { return c.preset; }});
    t.emplace_back("experiment.strategies",
                   Field{[](ExperimentConfig& c, const std::string& k, std::string_view v) {
                           c.strategies.clear();
                           for (auto s : split_on(v, ", ")) {
                             try {
                               c.strategies.emplace_back(federation::name(federation::parse_strategy(s)));
                             } catch (const ConfigError& e) {
                               throw requalify(e, k);
                             }
                           }
                         },
                         [](const ExperimentConfig& c) { return join(c.strategies, ", ", [](auto& s) { return s; }); }});
    t.emplace_back("experiment.seeds",
                   Field{[](ExperimentConfig& c, const std::string& k, std::string_view v) {
                           c.seeds.clear();
                           for (auto s : split_on(v, ", ")) c.seeds.push_back(to_u64(k, s));
                         },
                         [](const ExperimentConfig& c) {
                           return join(c.seeds, ", ", [](std::uint64_t s) { return std::to_string(s); });
                         }});
    t.emplace_back("experiment.out", path_field([](auto& c) -> auto& { return c.out; }));
    t.emplace_back("experiment.dump_buffers", bool_field([](auto& c) -> auto& { return c.dump_buffers; }));

    t.emplace_back("model.image_size", size_field([](auto& c) -> auto& { return c.model.image_size; }));
    t.emplace_back("model.patch_size", size_field([](auto& c) -> auto& { return c.model.patch_size; }));
    t.emplace_back("model.channels", size_field([](auto& c) -> auto& { return c.model.channels; }));
    t.emplace_back("model.embed_dim", size_field([](auto& c) -> auto& { return c.model.embed_dim; }));
    t.emplace_back("model.num_heads", size_field([](auto& c) -> auto& { return c.model.num_heads; }));
    t.emplace_back("model.num_layers", size_field([](auto& c) -> auto& { return c.model.num_layers; }));
    t.emplace_back("model.mlp_dim", size_field([](auto& c) -> auto& { return c.model.mlp_dim; }));
    t.emplace_back("model.prompt_len", size_field([](auto& c) -> auto& { return c.model.prompt_len; }));
    t.emplace_back("model.split_layer", size_field([](auto& c) -> auto& { return c.model.split_layer; }));
    t.emplace_back("model.num_classes", size_field([](auto& c) -> auto& { return c.model.num_classes; }));

    t.emplace_back("training.rounds", size_field([](auto& c) -> auto& { return c.training.rounds; }));
    t.emplace_back("training.epochs", size_field([](auto& c) -> auto& { return c.training.epochs; }));
    t.emplace_back("training.batch_size", size_field([](auto& c) -> auto& { return c.training.batch_size; }));
    t.emplace_back("training.lambda_kd", double_field([](auto& c) -> auto& { return c.training.lambda_kd; }));
    t.emplace_back("training.mu1", double_field([](auto& c) -> auto& { return c.training.mu1; }));
    t.emplace_back("training.mu2", double_field([](auto& c) -> auto& { return c.training.mu2; }));
    t.emplace_back("training.weight_decay", double_field([](auto& c) -> auto& { return c.training.weight_decay; }));
    t.emplace_back("training.buffer_maps", size_field([](auto& c) -> auto& { return c.training.buffer_maps; }));
    t.emplace_back("training.optimizer",
                   Field{[](ExperimentConfig& c, const std::string& k, std::string_view v) {
                           try {
                             c.training.optimizer = optim::parse_kind(v);
                           } catch (const std::exception& e) {
                             throw ConfigError(k, e.what());
                           }
                         },
                         [](const ExperimentConfig& c) { return std::string(optim::name(c.training.optimizer)); }});
    t.emplace_back("training.fedprox_mu", double_field([](auto& c) -> auto& { return c.training.fedprox_mu; }));
    t.emplace_back("training.fedproto_beta", double_field([](auto& c) -> auto& { return c.training.fedproto_beta; }));
    t.emplace_back("training.feddistill_gamma",
                   double_field([](auto& c) -> auto& { return c.training.feddistill_gamma; }));
    t.emplace_back("training.aggregate_head", bool_field([](auto& c) -> auto& { return c.training.aggregate_head; }));

    t.emplace_back("data.source",
                   Field{[](ExperimentConfig& c, const std::string& k, std::string_view v) {
                           if (v == "synthetic")
                             c.source = DataSource::Synthetic;
                           else if (v == "external")
                             c.source = DataSource::External;
                           else
                             throw ConfigError(k, fmt::format("expected synthetic or external, got '{}'", v));
                         },
                         [](const ExperimentConfig& c) { return std::string(name(c.source)); }});
    t.emplace_back("data.path", path_field([](auto& c) -> auto& { return c.data_path; }));
    t.emplace_back("data.client_sizes",
                   Field{[](ExperimentConfig& c, const std::string& k, std::string_view v) {
                           c.skew.client_sizes.clear();
                           for (auto s : split_on(v, ", ")) c.skew.client_sizes.push_back(to_u64(k, s));
                         },
                         [](const ExperimentConfig& c) {
                           return join(c.skew.client_sizes, ", ", [](std::size_t s) { return std::to_string(s); });
                         }});
    t.emplace_back("data.proportions",
                   Field{[](ExperimentConfig& c, const std::string& k, std::string_view v) {
                           c.skew.proportions.clear();
                           for (auto row : split_on(v, ";")) {
                             std::vector<double> r;
                             for (auto x : split_on(row, ", ")) r.push_back(to_double(k, x));
                             c.skew.proportions.push_back(std::move(r));
                           }
                         },
                         [](const ExperimentConfig& c) {
                           return join(c.skew.proportions, "; ", [](const std::vector<double>& r) { return join(r, " ", num); });
                         }});
    t.emplace_back("data.separability", double_field([](auto& c) -> auto& { return c.skew.separability; }));
    t.emplace_back("data.train_fraction", double_field([](auto& c) -> auto& { return c.train_fraction; }));

    t.emplace_back("backbone.init",
                   Field{[](ExperimentConfig& c, const std::string& k, std::string_view v) {
                           if (v == "random")
                             c.backbone = BackboneInit::Random;
                           else if (v == "pretext")
                             c.backbone = BackboneInit::Pretext;
                           else if (v == "file")
                             c.backbone = BackboneInit::File;
                           else
                             throw ConfigError(k, fmt::format("expected random, pretext or file, got '{}'", v));
                         },
                         [](const ExperimentConfig& c) { return std::string(name(c.backbone)); }});
    t.emplace_back("backbone.path", path_field([](auto& c) -> auto& { return c.backbone_path; }));
    t.emplace_back("backbone.seed", size_field([](auto& c) -> auto& { return c.backbone_seed; }));
    t.emplace_back("backbone.pretext_steps", size_field([](auto& c) -> auto& { return c.pretext_steps; }));
    return t;
  }();
  return table;
}

}  // namespace

std::string_view name(DataSource source) { return source == DataSource::Synthetic ? "synthetic" : "external"; }

std::string_view name(BackboneInit init) {
  switch (init) {
    case BackboneInit::Random: return "random";
    case BackboneInit::Pretext: return "pretext";
    case BackboneInit::File: return "file";
  }
  return "?";
}

void ExperimentConfig::validate() const {
  if (strategies.empty()) throw ConfigError("experiment.strategies", "need at least one strategy");
  for (const auto& s : strategies) {
    try {
      federation::parse_strategy(s);
    } catch (const ConfigError& e) {
      throw requalify(e, "experiment.strategies");
    }
  }
  if (seeds.empty()) throw ConfigError("experiment.seeds", "need at least one seed");
  if (out.empty()) throw ConfigError("experiment.out", "output directory is empty");
  try {
    model.validate();
  } catch (const ConfigError& e) {
    throw requalify(e, "model." + e.field());
  }
  try {
    training.validate();
  } catch (const ConfigError& e) {
    throw requalify(e, "training." + e.field());
  }
  if (source == DataSource::External) {
    if (data_path.empty()) throw ConfigError("data.path", "external data source needs a data path");
    if (!std::filesystem::is_directory(data_path))
      throw ConfigError("data.path", fmt::format("'{}' is not a directory", data_path.string()));
  } else {
    try {
      skew.validate();
    } catch (const ConfigError& e) {
      throw requalify(e, "data." + e.field());
    }
    if (skew.num_classes() != model.num_classes)
      throw ConfigError("data.proportions",
                        fmt::format("{} classes in proportions but model.num_classes = {}", skew.num_classes(), model.num_classes));
  }
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("data.train_fraction", "must lie in (0, 1)");
  if (backbone == BackboneInit::File) {
    if (backbone_path.empty()) throw ConfigError("backbone.path", "file backbone needs a weights path");
    if (!std::filesystem::is_regular_file(backbone_path))
      throw ConfigError("backbone.path", fmt::format("'{}' does not exist", backbone_path.string()));
  }
}

ExperimentConfig preset(std::string_view name) {
  ExperimentConfig c;
  if (name == "desk") return c;
  if (name == "paper") {
    c.preset = "paper";
    c.model = vit::ViTConfig::paper();
    c.source = DataSource::External;
    c.backbone = BackboneInit::File;
    c.skew = {};
    return c;
  }
  throw ConfigError("experiment.preset", fmt::format("unknown preset '{}' (expected desk or paper)", name));
}

IniValues parse_ini(std::string_view text, std::string_view source) {
  IniValues values;
  std::string section;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto nl = text.find('\n', start);
    const auto end = nl == std::string_view::npos ? text.size() : nl;
    auto line = text.substr(start, end - start);
    ++line_no;
    start = end + 1;
    if (const auto hash = line.find_first_of("#;"); hash != std::string_view::npos && trim(line.substr(0, hash)).empty())
      line = {};
    line = trim(line);
    if (!line.empty()) {
      const auto where = fmt::format("{}:{}", source, line_no);
      if (line.front() == '[') {
        if (line.back() != ']') throw ConfigError(where, "unterminated section header");
        section = std::string(trim(line.substr(1, line.size() - 2)));
        if (section.empty()) throw ConfigError(where, "empty section name");
      } else {
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) throw ConfigError(where, fmt::format("expected 'key = value', got '{}'", line));
        const auto key = trim(line.substr(0, eq));
        if (key.empty()) throw ConfigError(where, "missing key");
        if (section.empty()) throw ConfigError(where, fmt::format("key '{}' appears before any [section]", key));
        const auto full = section + "." + std::string(key);
        if (!values.emplace(full, std::string(trim(line.substr(eq + 1)))).second)
          throw ConfigError(where, fmt::format("duplicate key '{}'", full));
      }
    }
    if (nl == std::string_view::npos) break;
  }
  return values;
}

IniValues read_ini(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("--config", fmt::format("cannot open '{}'", path.string()));
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_ini(ss.str(), path.string());
}

void apply(ExperimentConfig& config, const IniValues& values) {
  const auto& table = fields();
  for (const auto& [key, value] : values) {
    auto it = std::find_if(table.begin(), table.end(), [&](const auto& f) { return f.first == key; });
    if (it == table.end()) throw ConfigError(key, "unknown configuration key");
    it->second.set(config, key, value);
  }
}

std::string to_ini(const ExperimentConfig& config) {
  std::string out;
  std::string section;
  for (const auto& [key, field] : fields()) {
    const auto dot = key.find('.');
    const auto sec = key.substr(0, dot);
    if (sec != section) {
      if (!section.empty()) out += '\n';
      out += fmt::format("[{}]\n", sec);
      section = sec;
    }
    const auto value = field.get(config);
    out += value.empty() ? fmt::format("{} =\n", key.substr(dot + 1)) : fmt::format("{} = {}\n", key.substr(dot + 1), value);
  }
  return out;
}

std::size_t thread_cap() {
  if (const char* env = std::getenv("FEDSIM_THREADS")) {
    std::size_t n = 0;
    std::string_view v(env);
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), n);
    if (ec == std::errc{} && p == v.data() + v.size() && n > 0) return n;
  }
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

}  // namespace fedsim::harness
