#include "katrec/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "katrec/error.hpp"

namespace katrec {

namespace {

constexpr const char* kWhere = "config";

struct Names {
  Ablation value;
  const char* name;
  const char* label;
};

constexpr Names kAblations[] = {
    {Ablation::none, "none", "KATRec"},
    {Ablation::no_attention, "no_attention", "NoAtten"},
    {Ablation::level1, "level1", "Level-1"},
    {Ablation::connection, "connection", "Connect"},
    {Ablation::no_pretrain, "no_pretrain", "NoPretrain"},
    {Ablation::concat, "concat", "Concat"},
};

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

// Drops a trailing comment that is not inside a quoted string.
std::string_view strip_comment(std::string_view line) {
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"') quoted = !quoted;
    if (line[i] == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

template <class T>
T parse_number(std::string_view key, std::string_view raw) {
  T out{};
  const auto* end = raw.data() + raw.size();
  const auto [ptr, ec] = std::from_chars(raw.data(), end, out);
  if (ec != std::errc() || ptr != end) fail(kWhere, key, ": expected a number, got '", raw, "'");
  return out;
}

double parse_real(std::string_view key, std::string_view raw) { return parse_number<double>(key, raw); }

std::size_t parse_count(std::string_view key, std::string_view raw) {
  if (!raw.empty() && raw.front() == '-') fail(kWhere, key, ": expected a non-negative integer, got '", raw, "'");
  return parse_number<std::size_t>(key, raw);
}

bool parse_bool(std::string_view key, std::string_view raw) {
  if (raw == "true") return true;
  if (raw == "false") return false;
  fail(kWhere, key, ": expected true or false, got '", raw, "'");
}

std::string parse_string(std::string_view key, std::string_view raw) {
  if (raw.size() < 2 || raw.front() != '"' || raw.back() != '"') {
    fail(kWhere, key, ": expected a quoted string, got '", raw, "'");
  }
  std::string out;
  for (std::size_t i = 1; i + 1 < raw.size(); ++i) {
    if (raw[i] == '\\' && i + 2 < raw.size()) {
      out += raw[++i];
    } else {
      out += raw[i];
    }
  }
  return out;
}

std::vector<std::size_t> parse_counts(std::string_view key, std::string_view raw) {
  if (raw.size() < 2 || raw.front() != '[' || raw.back() != ']') {
    fail(kWhere, key, ": expected an array like [32, 16], got '", raw, "'");
  }
  std::vector<std::size_t> out;
  std::string_view body = trim(raw.substr(1, raw.size() - 2));
  while (!body.empty()) {
    const auto comma = body.find(',');
    out.push_back(parse_count(key, trim(body.substr(0, comma))));
    if (comma == std::string_view::npos) break;
    body = trim(body.substr(comma + 1));
  }
  return out;
}

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + "\"";
}

std::string real(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  std::string s(buf, ptr);
  if (s.find_first_of(".eni") == std::string::npos) s += ".0";
  return s;
}

std::string counts(const std::vector<std::size_t>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + std::to_string(v[i]);
  return s + "]";
}

std::string boolean(bool b) { return b ? "true" : "false"; }

struct Field {
  const char* key;  // "section.name", or a bare name for top-level keys
  std::function<void(RunConfig&, std::string_view, const std::filesystem::path&)> set;
  std::function<std::optional<std::string>(const RunConfig&)> get;
};

std::string resolve(const std::string& path, const std::filesystem::path& base) {
  if (path.empty() || base.empty()) return path;
  const std::filesystem::path p(path);
  return p.is_absolute() ? path : (base / p).lexically_normal().string();
}

#define KATREC_SIZE(KEY, MEMBER)                                                                            \
  Field {                                                                                                   \
    KEY, [](RunConfig& c, std::string_view v, const auto&) { c.MEMBER = parse_count(KEY, v); },             \
        [](const RunConfig& c) -> std::optional<std::string> { return std::to_string(c.MEMBER); }           \
  }
#define KATREC_REAL(KEY, MEMBER)                                                                            \
  Field {                                                                                                   \
    KEY, [](RunConfig& c, std::string_view v, const auto&) { c.MEMBER = parse_real(KEY, v); },              \
        [](const RunConfig& c) -> std::optional<std::string> { return real(c.MEMBER); }                     \
  }
#define KATREC_BOOL(KEY, MEMBER)                                                                            \
  Field {                                                                                                   \
    KEY, [](RunConfig& c, std::string_view v, const auto&) { c.MEMBER = parse_bool(KEY, v); },              \
        [](const RunConfig& c) -> std::optional<std::string> { return boolean(c.MEMBER); }                  \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      {"ablation", [](RunConfig& c, std::string_view v, const auto&) { c.ablation = parse_ablation(parse_string("ablation", v)); },
       [](const RunConfig& c) -> std::optional<std::string> { return quote(ablation_name(c.ablation)); }},
      {"data.interactions",
       [](RunConfig& c, std::string_view v, const auto& base) {
         c.interactions = resolve(parse_string("data.interactions", v), base);
       },
       [](const RunConfig& c) -> std::optional<std::string> { return quote(c.interactions); }},
      {"data.triplets",
       [](RunConfig& c, std::string_view v, const auto& base) {
         c.triplets = resolve(parse_string("data.triplets", v), base);
       },
       [](const RunConfig& c) -> std::optional<std::string> { return quote(c.triplets); }},
      KATREC_SIZE("data.min_user_interactions", filter.min_user_interactions),
      KATREC_SIZE("data.min_item_interactions", filter.min_item_interactions),
      KATREC_SIZE("data.min_entity_occurrences", filter.min_entity_occurrences),
      KATREC_SIZE("data.min_relation_occurrences", filter.min_relation_occurrences),
      KATREC_SIZE("kg.dim", kg_dims.d),
      {"kg.layers", [](RunConfig& c, std::string_view v, const auto&) { c.kg_dims.layers = parse_counts("kg.layers", v); },
       [](const RunConfig& c) -> std::optional<std::string> { return counts(c.kg_dims.layers); }},
      KATREC_REAL("kg.lambda", lambda),
      {"kg.attention",
       [](RunConfig& c, std::string_view v, const auto&) {
         const auto s = parse_string("kg.attention", v);
         if (s == "attentive") {
           c.attention = kg::AttentionMode::attentive;
         } else if (s == "uniform") {
           c.attention = kg::AttentionMode::uniform;
         } else {
           fail(kWhere, "kg.attention: expected \"attentive\" or \"uniform\", got '", s, "'");
         }
       },
       [](const RunConfig& c) -> std::optional<std::string> {
         return quote(c.attention == kg::AttentionMode::attentive ? "attentive" : "uniform");
       }},
      KATREC_SIZE("kg.max_neighbors", max_neighbors),
      KATREC_SIZE("seq.heads", seq.heads),
      KATREC_SIZE("seq.layers", seq.layers),
      KATREC_SIZE("seq.max_len", seq.max_len),
      KATREC_REAL("seq.mask_prob", mask_prob),
      KATREC_REAL("seq.dropout", seq.dropout),
      {"seq.positional",
       [](RunConfig& c, std::string_view v, const auto&) {
         const auto s = parse_string("seq.positional", v);
         if (s == "learned") {
           c.seq.positional = seq::PositionalMode::learned;
         } else if (s == "sinusoid") {
           c.seq.positional = seq::PositionalMode::sinusoid;
         } else {
           fail(kWhere, "seq.positional: expected \"learned\" or \"sinusoid\", got '", s, "'");
         }
       },
       [](const RunConfig& c) -> std::optional<std::string> {
         return quote(c.seq.positional == seq::PositionalMode::learned ? "learned" : "sinusoid");
       }},
      KATREC_BOOL("seq.explicit_user", seq.explicit_user),
      KATREC_REAL("train.lr", lr),
      KATREC_REAL("train.beta1", beta1),
      KATREC_REAL("train.beta2", beta2),
      KATREC_REAL("train.adam_eps", adam_eps),
      KATREC_REAL("train.weight_decay", weight_decay),
      KATREC_SIZE("train.pretrain_epochs", pretrain_epochs),
      KATREC_SIZE("train.joint_epochs", joint_epochs),
      KATREC_SIZE("train.patience", patience),
      KATREC_BOOL("train.early_stopping", early_stopping),
      KATREC_SIZE("train.seq_batch_size", seq_batch_size),
      KATREC_SIZE("train.triplet_batch_size", triplet_batch_size),
      KATREC_SIZE("train.seed", seed),
      {"train.dropout_seed",
       [](RunConfig& c, std::string_view v, const auto&) { c.dropout_seed = parse_count("train.dropout_seed", v); },
       [](const RunConfig& c) -> std::optional<std::string> {
         if (!c.dropout_seed) return std::nullopt;
         return std::to_string(*c.dropout_seed);
       }},
      {"train.precision",
       [](RunConfig& c, std::string_view v, const auto&) {
         const auto bits = parse_count("train.precision", v);
         if (bits != 32 && bits != 64) fail(kWhere, "train.precision: expected 32 or 64, got ", bits);
         c.float32 = bits == 32;
       },
       [](const RunConfig& c) -> std::optional<std::string> { return c.float32 ? "32" : "64"; }},
      KATREC_SIZE("eval.negatives", eval_negatives),
      {"eval.negative_sampling",
       [](RunConfig& c, std::string_view v, const auto&) {
         const auto s = parse_string("eval.negative_sampling", v);
         if (s == "uniform") {
           c.negative_sampling = data::NegativeSampling::uniform;
         } else if (s == "popularity") {
           c.negative_sampling = data::NegativeSampling::popularity;
         } else {
           fail(kWhere, "eval.negative_sampling: expected \"uniform\" or \"popularity\", got '", s, "'");
         }
       },
       [](const RunConfig& c) -> std::optional<std::string> {
         return quote(c.negative_sampling == data::NegativeSampling::uniform ? "uniform" : "popularity");
       }},
      {"eval.buckets", [](RunConfig& c, std::string_view v, const auto&) { c.bucket_edges = parse_counts("eval.buckets", v); },
       [](const RunConfig& c) -> std::optional<std::string> { return counts(c.bucket_edges); }},
      KATREC_SIZE("eval.attention_window", attention_window),
  };
  return table;
}

#undef KATREC_SIZE
#undef KATREC_REAL
#undef KATREC_BOOL

const Field& find_field(std::string_view key) {
  for (const auto& f : fields()) {
    if (key == f.key) return f;
  }
  fail(kWhere, "unknown key '", key, "'");
}

}  // namespace

Ablation parse_ablation(std::string_view name) {
  for (const auto& a : kAblations) {
    if (name == a.name) return a.value;
  }
  fail("ablation", "unknown variant '", name,
       "' (expected none, no_attention, level1, connection, no_pretrain or concat)");
}

const char* ablation_name(Ablation a) {
  for (const auto& n : kAblations) {
    if (n.value == a) return n.name;
  }
  return "?";
}

const char* ablation_label(Ablation a) {
  for (const auto& n : kAblations) {
    if (n.value == a) return n.label;
  }
  return "?";
}

void RunConfig::finalize() {
  if (kg_dims.d == 0) fail(kWhere, "kg.dim must be positive");
  for (auto w : kg_dims.layers) {
    if (w == 0) fail(kWhere, "kg.layers entries must be positive");
  }
  seq.q = q();
  if (seq.heads == 0 || seq.q % seq.heads != 0) {
    fail(kWhere, "hidden width ", seq.q, " is not divisible by seq.heads = ", seq.heads);
  }
  if (seq.layers == 0) fail(kWhere, "seq.layers must be positive");
  if (seq.max_len < 2) fail(kWhere, "seq.max_len must be at least 2");
  if (!(mask_prob > 0.0 && mask_prob <= 1.0)) fail(kWhere, "seq.mask_prob must be in (0, 1]");
  if (seq.dropout < 0.0 || seq.dropout >= 1.0) fail(kWhere, "seq.dropout must be in [0, 1)");
  if (seq_batch_size == 0 || triplet_batch_size == 0) fail(kWhere, "batch sizes must be positive");
  if (lr <= 0.0) fail(kWhere, "train.lr must be positive");
  if (eval_negatives == 0) fail(kWhere, "eval.negatives must be positive");
  if (attention_window == 0 || attention_window > seq.max_len) {
    fail(kWhere, "eval.attention_window must be in 1..seq.max_len");
  }
  for (std::size_t i = 1; i < bucket_edges.size(); ++i) {
    if (bucket_edges[i] <= bucket_edges[i - 1]) fail(kWhere, "eval.buckets must be strictly increasing");
  }
  seq.fuse = ablation != Ablation::concat;
}

RunConfig parse_config(std::string_view text, const std::filesystem::path& base_dir) {
  RunConfig config;
  std::string section;
  std::map<std::string, std::size_t> seen;
  std::size_t lineno = 0;
  std::istringstream in{std::string(text)};
  for (std::string raw; std::getline(in, raw);) {
    ++lineno;
    const auto line = trim(strip_comment(raw));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') fail(kWhere, "line ", lineno, ": malformed section header");
      section = std::string(trim(line.substr(1, line.size() - 2)));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) fail(kWhere, "line ", lineno, ": expected key = value");
    const std::string name(trim(line.substr(0, eq)));
    const std::string key = section.empty() ? name : section + "." + name;
    if (auto [it, inserted] = seen.emplace(key, lineno); !inserted) {
      fail(kWhere, "line ", lineno, ": key '", key, "' already set on line ", it->second);
    }
    find_field(key).set(config, trim(line.substr(eq + 1)), base_dir);
  }
  config = apply_ablation(config, config.ablation);
  return config;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(kWhere, "cannot open ", path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), path.parent_path());
}

void apply_override(RunConfig& config, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) fail(kWhere, "override '", assignment, "' is not key=value");
  const auto key = trim(assignment.substr(0, eq));
  auto value = std::string(trim(assignment.substr(eq + 1)));
  const auto& field = find_field(key);
  // Shell users rarely quote strings twice; accept bare words for string keys.
  const bool wants_string = field.get(config).value_or("\"").front() == '"';
  if (wants_string && (value.empty() || value.front() != '"')) value = quote(value);
  field.set(config, value, std::filesystem::current_path());
  config = apply_ablation(config, config.ablation);
}

std::string to_toml(const RunConfig& config) {
  std::string out;
  std::string section;
  for (const auto& f : fields()) {
    const std::string key = f.key;
    const auto dot = key.find('.');
    const std::string sec = dot == std::string::npos ? "" : key.substr(0, dot);
    const auto value = f.get(config);
    if (!value) continue;
    if (sec != section) {
      out += "\n[" + sec + "]\n";
      section = sec;
    }
    out += (dot == std::string::npos ? key : key.substr(dot + 1)) + " = " + *value + "\n";
  }
  return out;
}

RunConfig apply_ablation(RunConfig config, Ablation variant) {
  config.ablation = variant;
  switch (variant) {
    case Ablation::no_attention:
      config.attention = kg::AttentionMode::uniform;
      break;
    case Ablation::level1:
      if (config.kg_dims.layers.size() > 1) config.kg_dims.layers.resize(1);
      break;
    case Ablation::no_pretrain:
      config.pretrain_epochs = 0;
      break;
    case Ablation::none:
    case Ablation::connection:
    case Ablation::concat:
      break;
  }
  config.finalize();
  return config;
}

}  // namespace katrec
