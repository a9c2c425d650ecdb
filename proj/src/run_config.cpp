#include "hps/run_config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string_view>
#include <vector>

#include "hps/errors.hpp"

namespace hps {
namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

struct Site {
  const std::string& origin;
  std::size_t line;
  std::string_view key;

  [[noreturn]] void fail(const std::string& what) const {
    throw ConfigError(origin + ":" + std::to_string(line) + ": " +
                      std::string(key) + ": " + what);
  }
};

template <typename T>
T parse_number(std::string_view v, const Site& at, const char* kind) {
  T out{};
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec == std::errc::result_out_of_range) {
    at.fail("value '" + std::string(v) + "' is out of range");
  }
  if (ec != std::errc() || end != v.data() + v.size()) {
    at.fail(std::string("expected ") + kind + ", got '" + std::string(v) + "'");
  }
  return out;
}

std::uint64_t parse_u64(std::string_view v, const Site& at) {
  return parse_number<std::uint64_t>(v, at, "a non-negative integer");
}

std::size_t parse_size(std::string_view v, const Site& at) {
  return parse_number<std::size_t>(v, at, "a non-negative integer");
}

int parse_int(std::string_view v, const Site& at) {
  return parse_number<int>(v, at, "an integer");
}

double parse_double(std::string_view v, const Site& at) {
  const double d = parse_number<double>(v, at, "a number");
  if (!std::isfinite(d)) at.fail("value must be finite");
  return d;
}

template <typename T, typename F>
std::vector<T> parse_list(std::string_view v, const Site& at, F item) {
  std::vector<T> out;
  if (trim(v).empty()) return out;
  std::size_t start = 0;
  while (true) {
    const auto comma = v.find(',', start);
    const std::string_view part =
        trim(v.substr(start, comma == std::string_view::npos ? v.npos : comma - start));
    if (part.empty()) at.fail("empty item in list '" + std::string(v) + "'");
    out.push_back(item(part, at));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

// Shortest text that parses back to the same double.
std::string format_double(double d) {
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, d);
  return std::string(buf, end);
}

template <typename C>
std::string join(const C& items, std::string (*fmt)(typename C::value_type)) {
  std::string out;
  for (const auto& x : items) {
    if (!out.empty()) out += ",";
    out += fmt(x);
  }
  return out;
}

std::string format_size(std::size_t v) { return std::to_string(v); }

struct Field {
  const char* key;
  std::function<void(RunConfig&, std::string_view, const Site&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define HPS_SIZE_FIELD(name, member)                                          \
  Field {                                                                     \
    name, [](RunConfig& c, std::string_view v, const Site& at) {              \
      c.member = parse_size(v, at);                                           \
    },                                                                        \
        [](const RunConfig& c) { return std::to_string(c.member); }           \
  }
#define HPS_DOUBLE_FIELD(name, member)                                        \
  Field {                                                                     \
    name, [](RunConfig& c, std::string_view v, const Site& at) {              \
      c.member = parse_double(v, at);                                         \
    },                                                                        \
        [](const RunConfig& c) { return format_double(c.member); }            \
  }
#define HPS_INT_FIELD(name, member)                                           \
  Field {                                                                     \
    name, [](RunConfig& c, std::string_view v, const Site& at) {              \
      c.member = parse_int(v, at);                                            \
    },                                                                        \
        [](const RunConfig& c) { return std::to_string(c.member); }           \
  }
#define HPS_U64_FIELD(name, member)                                           \
  Field {                                                                     \
    name, [](RunConfig& c, std::string_view v, const Site& at) {              \
      c.member = parse_u64(v, at);                                            \
    },                                                                        \
        [](const RunConfig& c) { return std::to_string(c.member); }           \
  }
#define HPS_STRING_FIELD(name, member)                                        \
  Field {                                                                     \
    name, [](RunConfig& c, std::string_view v, const Site& at) {              \
      if (v.empty() || v.find_first_of(" \t#/\\") != std::string_view::npos) { \
        at.fail("expected a plain directory name, got '" + std::string(v) + "'"); \
      }                                                                       \
      c.member = std::string(v);                                              \
    },                                                                        \
        [](const RunConfig& c) { return c.member; }                           \
  }

// Echo order follows this table.
const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      HPS_INT_FIELD("transformers", model.transformers),
      HPS_INT_FIELD("layers_per_level", model.layers_per_level),
      HPS_SIZE_FIELD("num_queries", model.num_queries),
      HPS_SIZE_FIELD("embed_dim", model.embed_dim),
      HPS_SIZE_FIELD("ffn_dim", model.ffn_dim),
      HPS_SIZE_FIELD("heads", model.heads),
      HPS_SIZE_FIELD("mask_stride", model.mask_stride),
      Field{"backbone_widths",
            [](RunConfig& c, std::string_view v, const Site& at) {
              const auto w = parse_list<std::size_t>(v, at, parse_size);
              if (w.size() != c.model.backbone_widths.size()) {
                at.fail("expected 4 comma-separated widths");
              }
              std::copy(w.begin(), w.end(), c.model.backbone_widths.begin());
            },
            [](const RunConfig& c) { return join(c.model.backbone_widths, format_size); }},
      HPS_U64_FIELD("model_seed", model_seed),
      HPS_DOUBLE_FIELD("lambda_cls", loss.cls),
      HPS_DOUBLE_FIELD("lambda_mask", loss.mask),
      HPS_DOUBLE_FIELD("no_object_weight", loss.no_object),
      HPS_DOUBLE_FIELD("mask_confidence_threshold", inference.mask_confidence_threshold),
      HPS_DOUBLE_FIELD("overlap_threshold", inference.overlap_threshold),
      HPS_DOUBLE_FIELD("base_lr", train.base_lr),
      HPS_DOUBLE_FIELD("weight_decay", train.weight_decay),
      HPS_DOUBLE_FIELD("backbone_lr_mult", train.backbone_lr_mult),
      Field{"decay_fractions",
            [](RunConfig& c, std::string_view v, const Site& at) {
              c.train.decay_fractions = parse_list<double>(v, at, parse_double);
            },
            [](const RunConfig& c) { return join(c.train.decay_fractions, format_double); }},
      HPS_DOUBLE_FIELD("decay_factor", train.decay_factor),
      HPS_SIZE_FIELD("epochs", train.epochs),
      HPS_SIZE_FIELD("max_steps", train.max_steps),
      HPS_INT_FIELD("freeze_stages", train.freeze_stages),
      HPS_DOUBLE_FIELD("clip_norm", train.clip_norm),
      HPS_DOUBLE_FIELD("adam_beta1", train.beta1),
      HPS_DOUBLE_FIELD("adam_beta2", train.beta2),
      HPS_DOUBLE_FIELD("adam_eps", train.eps),
      HPS_SIZE_FIELD("eval_every", train.eval_every),
      HPS_U64_FIELD("seed", train.seed),
      HPS_SIZE_FIELD("target_stride", target_stride),
      Field{"gt_pool",
            [](RunConfig& c, std::string_view v, const Site& at) {
              if (v == "max") {
                c.gt_pool = PoolMode::max;
              } else if (v == "average") {
                c.gt_pool = PoolMode::average;
              } else {
                at.fail("expected 'max' or 'average', got '" + std::string(v) + "'");
              }
            },
            [](const RunConfig& c) {
              return std::string(c.gt_pool == PoolMode::max ? "max" : "average");
            }},
      HPS_STRING_FIELD("train_split", train_split),
      HPS_STRING_FIELD("val_split", val_split),
  };
  return table;
}

#undef HPS_SIZE_FIELD
#undef HPS_DOUBLE_FIELD
#undef HPS_INT_FIELD
#undef HPS_U64_FIELD
#undef HPS_STRING_FIELD

}  // namespace

void RunConfig::validate() const {
  model.validate();
  train.validate();
  inference.validate();
  loss.validate();
  if (target_stride != 0 && model.mask_stride % target_stride != 0) {
    throw ConfigError("target_stride must divide mask_stride " +
                      std::to_string(model.mask_stride));
  }
  if (train_split == val_split) {
    throw ConfigError("train_split and val_split must differ");
  }
}

RunConfig parse_config_text(const std::string& text, const std::string& origin) {
  RunConfig cfg;
  std::set<std::string, std::less<>> seen;
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line = raw;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError(origin + ":" + std::to_string(line_no) +
                        ": expected key=value, got '" + std::string(line) + "'");
    }
    const std::string_view key = trim(line.substr(0, eq));
    const std::string_view value = trim(line.substr(eq + 1));
    const Site at{origin, line_no, key};
    const Field* field = nullptr;
    for (const auto& f : fields()) {
      if (key == f.key) field = &f;
    }
    if (!field) at.fail("unknown key");
    if (!seen.insert(std::string(key)).second) at.fail("key given twice");
    field->set(cfg, value, at);
  }
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return cfg;
}

RunConfig parse_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read config " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  if (in.bad()) throw DataError("failed reading config " + path.string());
  return parse_config_text(text.str(), path.string());
}

std::string echo_config(const RunConfig& config) {
  std::string out;
  for (const auto& f : fields()) out += std::string(f.key) + "=" + f.get(config) + "\n";
  return out;
}

}  // namespace hps
