// command line front end: tokenize / train / predict / generate / evaluate.
// every command is deterministic given (config, seed, checkpoint); reports
// embed the config and dataset hashes so artifacts trace back to their inputs.
// exit codes: 0 ok, 2 usage/config error, 3 data error, 4 numeric failure.

#include <algorithm>
#include <cctype>
#include <cerrno>
#include <climits>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "rt/data.hpp"
#include "rt/decoding.hpp"
#include "rt/errors.hpp"
#include "rt/metrics.hpp"
#include "rt/model.hpp"
#include "rt/objectives.hpp"
#include "rt/protocols.hpp"
#include "rt/rng.hpp"
#include "rt/tokenizer.hpp"
#include "rt/tokens.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace rt;

namespace {

// ---------------------------------------------------------------- utilities

std::string hex64(uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

uint64_t parse_u64(const std::string& s, const std::string& what) {
  char* end = nullptr;
  errno = 0;
  unsigned long long v = std::strtoull(s.c_str(), &end, 10);
  if (errno != 0 || end == s.c_str() || *end != '\0')
    throw ConfigError(what + ": not an unsigned integer: " + s);
  return v;
}

long long parse_ll(const std::string& s, const std::string& what) {
  char* end = nullptr;
  errno = 0;
  long long v = std::strtoll(s.c_str(), &end, 10);
  if (errno != 0 || end == s.c_str() || *end != '\0')
    throw ConfigError(what + ": not an integer: " + s);
  return v;
}

int parse_int(const std::string& s, const std::string& what) {
  long long v = parse_ll(s, what);
  if (v < INT_MIN || v > INT_MAX) throw ConfigError(what + ": out of range: " + s);
  return static_cast<int>(v);
}

double parse_num(const std::string& s, const std::string& what) {
  char* end = nullptr;
  errno = 0;
  double v = std::strtod(s.c_str(), &end);
  if (errno != 0 || end == s.c_str() || *end != '\0')
    throw ConfigError(what + ": not a number: " + s);
  return v;
}

bool parse_bool(const std::string& s, const std::string& what) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError(what + ": expected true/false: " + s);
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (!std::isspace(static_cast<unsigned char>(c))) {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::vector<double> parse_num_list(const std::string& s, const std::string& what) {
  std::vector<double> out;
  for (const std::string& p : split_csv(s)) out.push_back(parse_num(p, what));
  return out;
}

std::vector<int> parse_int_list(const std::string& s, const std::string& what) {
  std::vector<int> out;
  for (const std::string& p : split_csv(s)) out.push_back(parse_int(p, what));
  return out;
}

std::string read_text_file(const std::string& path, const std::string& what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(what + ": cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ------------------------------------------------------------------- flags

// --name value pairs; names in `unary` take no value ("--resume")
struct ArgSet {
  std::map<std::string, std::string> vals;

  bool has(const std::string& name) const { return vals.count(name) != 0; }
  const std::string& get(const std::string& name) const {
    auto it = vals.find(name);
    if (it == vals.end()) throw ConfigError("missing required flag --" + name);
    return it->second;
  }
  std::string get_or(const std::string& name, const std::string& def) const {
    auto it = vals.find(name);
    return it == vals.end() ? def : it->second;
  }
};

ArgSet parse_flags(int argc, char** argv, int start, const std::set<std::string>& allowed,
                   const std::set<std::string>& unary) {
  ArgSet out;
  for (int i = start; i < argc; ++i) {
    std::string tok = argv[i];
    if (tok.rfind("--", 0) != 0)
      throw ConfigError("unexpected positional argument: " + tok);
    std::string name = tok.substr(2);
    if (!allowed.count(name) && !unary.count(name))
      throw ConfigError("unknown flag --" + name);
    if (unary.count(name)) {
      out.vals[name] = "true";
      continue;
    }
    if (i + 1 >= argc) throw ConfigError("flag --" + name + " needs a value");
    out.vals[name] = argv[++i];
  }
  return out;
}

// ------------------------------------------------------------- config file

// sectioned key-value text: [section] headers, key = value lines, # comments.
// values may be double-quoted; quoting is only required for empty strings.
std::map<std::string, std::map<std::string, std::string>> parse_sections(const std::string& text) {
  std::map<std::string, std::map<std::string, std::string>> out;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  auto trim = [](std::string s) {
    size_t a = s.find_first_not_of(" \t\r");
    size_t b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (t.front() == '[') {
      if (t.back() != ']')
        throw ConfigError("config line " + std::to_string(lineno) + ": unterminated section header");
      section = trim(t.substr(1, t.size() - 2));
      if (section.empty())
        throw ConfigError("config line " + std::to_string(lineno) + ": empty section name");
      out[section];
      continue;
    }
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    if (section.empty())
      throw ConfigError("config line " + std::to_string(lineno) + ": key outside any [section]");
    std::string key = trim(t.substr(0, eq));
    std::string val = trim(t.substr(eq + 1));
    if (key.empty())
      throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    if (val.size() >= 2 && val.front() == '"' && val.back() == '"')
      val = val.substr(1, val.size() - 2);
    if (out[section].count(key))
      throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key " + section +
                        "." + key);
    out[section][key] = val;
  }
  return out;
}

// typed access with consumption tracking so leftovers can be rejected
class SectionView {
 public:
  SectionView(std::string name, const std::map<std::string, std::string>* kv)
      : name_(std::move(name)), kv_(kv) {}

  bool has(const std::string& key) const { return kv_ && kv_->count(key); }
  std::string str(const std::string& key, const std::string& def) {
    auto* v = take(key);
    return v ? *v : def;
  }
  long long integer(const std::string& key, long long def) {
    auto* v = take(key);
    return v ? parse_ll(*v, name_ + "." + key) : def;
  }
  double number(const std::string& key, double def) {
    auto* v = take(key);
    return v ? parse_num(*v, name_ + "." + key) : def;
  }
  bool boolean(const std::string& key, bool def) {
    auto* v = take(key);
    return v ? parse_bool(*v, name_ + "." + key) : def;
  }
  std::optional<uint64_t> seed(const std::string& key) {
    auto* v = take(key);
    if (!v) return std::nullopt;
    return parse_u64(*v, name_ + "." + key);
  }
  std::vector<double> numbers(const std::string& key, std::vector<double> def) {
    auto* v = take(key);
    return v ? parse_num_list(*v, name_ + "." + key) : def;
  }
  std::vector<int> integers(const std::string& key, std::vector<int> def) {
    auto* v = take(key);
    return v ? parse_int_list(*v, name_ + "." + key) : def;
  }
  void reject_leftovers() const {
    if (!kv_) return;
    for (const auto& [k, v] : *kv_)
      if (!used_.count(k)) throw ConfigError("unknown config key " + name_ + "." + k);
  }

 private:
  const std::string* take(const std::string& key) {
    if (!kv_) return nullptr;
    auto it = kv_->find(key);
    if (it == kv_->end()) return nullptr;
    used_.insert(key);
    return &it->second;
  }

  std::string name_;
  const std::map<std::string, std::string>* kv_;
  std::set<std::string> used_;
};

struct DataCfg {
  std::string kind;    // synthetic generator name; empty when path is given
  std::string path;    // dataset file; empty when kind is given
  std::string format = "jsonl";
  std::string property;  // empty -> generator label / the file's sole property
  int n = 1000, len = 20, alphabet = 10, decimals = 3;
  double lo = 0.0, hi = 1.0;
  double train = 0.9, valid = 0.05, test = 0.05;
  double jitter_sigma = 0.0, jitter_threshold = 0.1;
};

struct EvalCfg {
  std::string property;      // empty -> the schema's only property
  std::string split = "test";
  std::string oracle = "synthetic";
  int n_seeds = 10;
  int n_primers = 10;
  double mask_fraction = 0.4;
  int max_span = 5;
  int beam = 5;
  int top_k = 0;  // 0 -> per-protocol default (3 reconstruct, 5 decorate)
  int segment = 0;
  bool with_property = true;
  double boost = 0.2;
  double delta = 0.5;
  double primer = 1.0;
  int pool = 80;
  std::vector<double> fractions = {0.2, 0.4, 0.6};
  std::vector<int> spans = {1, 3, 5};
  int k = 25;
  std::string distance = "levenshtein";
};

struct DecodeCfg {
  int beam = 5;
  double mask_fraction = 0.4;
  int max_span = 5;
};

struct RunCfg {
  std::string id = "run";
  std::string out = ".";
  std::optional<uint64_t> seed;
  DataCfg data;
  ModelConfig model;
  TrainerConfig trainer;
  double stop_rmse = 0.0, stop_rho = 0.0;  // early stop thresholds; 0 = off
  EvalCfg eval;
  DecodeCfg decode;
  uint64_t hash = 0;  // over the raw config text
};

NeMode ne_mode_from_string(const std::string& s) {
  if (s == "float") return NeMode::Float;
  if (s == "int") return NeMode::Int;
  if (s == "none") return NeMode::None;
  throw ConfigError("model.ne_mode: expected float/int/none, got " + s);
}

NeCombine ne_combine_from_string(const std::string& s) {
  if (s == "sum") return NeCombine::Sum;
  if (s == "concat") return NeCombine::Concat;
  throw ConfigError("model.ne_combine: expected sum/concat, got " + s);
}

KnnDistance knn_distance_from_string(const std::string& s) {
  if (s == "levenshtein") return KnnDistance::Levenshtein;
  if (s == "tanimoto") return KnnDistance::Tanimoto;
  throw ConfigError("eval.distance: expected levenshtein/tanimoto, got " + s);
}

RunCfg parse_run_config(const std::string& path) {
  const std::string text = read_text_file(path, "config");
  auto sections = parse_sections(text);

  RunCfg cfg;
  cfg.hash = fnv1a64(text);

  std::set<std::string> known = {"run", "data", "model", "trainer", "eval", "decode"};
  for (const auto& [name, kv] : sections)
    if (!known.count(name)) throw ConfigError("unknown config section [" + name + "]");
  auto view = [&](const char* name) {
    auto it = sections.find(name);
    return SectionView(name, it == sections.end() ? nullptr : &it->second);
  };

  SectionView run = view("run");
  cfg.id = run.str("id", cfg.id);
  cfg.out = run.str("out", cfg.out);
  cfg.seed = run.seed("seed");
  run.reject_leftovers();

  SectionView data = view("data");
  cfg.data.kind = data.str("kind", "");
  cfg.data.path = data.str("path", "");
  cfg.data.format = data.str("format", cfg.data.format);
  cfg.data.property = data.str("property", "");
  cfg.data.n = static_cast<int>(data.integer("n", cfg.data.n));
  cfg.data.len = static_cast<int>(data.integer("len", cfg.data.len));
  cfg.data.alphabet = static_cast<int>(data.integer("alphabet", cfg.data.alphabet));
  cfg.data.decimals = static_cast<int>(data.integer("decimals", cfg.data.decimals));
  cfg.data.lo = data.number("lo", cfg.data.lo);
  cfg.data.hi = data.number("hi", cfg.data.hi);
  cfg.data.train = data.number("train_ratio", cfg.data.train);
  cfg.data.valid = data.number("valid_ratio", cfg.data.valid);
  cfg.data.test = data.number("test_ratio", cfg.data.test);
  cfg.data.jitter_sigma = data.number("jitter_sigma", cfg.data.jitter_sigma);
  cfg.data.jitter_threshold = data.number("jitter_threshold", cfg.data.jitter_threshold);
  data.reject_leftovers();
  if (cfg.data.format != "jsonl" && cfg.data.format != "csv")
    throw ConfigError("data.format: expected jsonl/csv, got " + cfg.data.format);

  SectionView model = view("model");
  cfg.model.n_layers = static_cast<int>(model.integer("layers", cfg.model.n_layers));
  cfg.model.d_e = static_cast<int>(model.integer("d_e", cfg.model.d_e));
  cfg.model.d_ff = static_cast<int>(model.integer("d_ff", cfg.model.d_ff));
  cfg.model.n_heads = static_cast<int>(model.integer("heads", cfg.model.n_heads));
  cfg.model.max_len = static_cast<int>(model.integer("max_len", cfg.model.max_len));
  cfg.model.dropout = model.number("dropout", cfg.model.dropout);
  cfg.model.sinusoidal_positions = model.boolean("sinusoidal", cfg.model.sinusoidal_positions);
  cfg.model.encoding.mode = ne_mode_from_string(model.str("ne_mode", "float"));
  cfg.model.encoding.combine = ne_combine_from_string(model.str("ne_combine", "sum"));
  cfg.model.encoding.ne_dim = static_cast<int>(model.integer("ne_dim", cfg.model.encoding.ne_dim));
  model.reject_leftovers();

  SectionView trainer = view("trainer");
  cfg.trainer.mode = objective_mode_from_string(trainer.str("mode", "alternating"));
  cfg.trainer.alpha = trainer.number("alpha", cfg.trainer.alpha);
  cfg.trainer.alternation_period =
      static_cast<int>(trainer.integer("period", cfg.trainer.alternation_period));
  cfg.trainer.mask_fraction = trainer.number("mask_fraction", cfg.trainer.mask_fraction);
  cfg.trainer.max_span = static_cast<int>(trainer.integer("max_span", cfg.trainer.max_span));
  cfg.trainer.batch_size = static_cast<int>(trainer.integer("batch", cfg.trainer.batch_size));
  cfg.trainer.total_steps = trainer.integer("steps", cfg.trainer.total_steps);
  cfg.trainer.eval_every = static_cast<int>(trainer.integer("eval_every", cfg.trainer.eval_every));
  cfg.trainer.checkpoint_every =
      static_cast<int>(trainer.integer("checkpoint_every", cfg.trainer.checkpoint_every));
  cfg.trainer.adam.lr = trainer.number("lr", cfg.trainer.adam.lr);
  cfg.trainer.adam.clip = trainer.number("clip", cfg.trainer.adam.clip);
  cfg.stop_rmse = trainer.number("stop_rmse", cfg.stop_rmse);
  cfg.stop_rho = trainer.number("stop_rho", cfg.stop_rho);
  trainer.reject_leftovers();

  SectionView eval = view("eval");
  cfg.eval.property = eval.str("property", "");
  cfg.eval.split = eval.str("split", cfg.eval.split);
  cfg.eval.oracle = eval.str("oracle", cfg.eval.oracle);
  cfg.eval.n_seeds = static_cast<int>(eval.integer("n_seeds", cfg.eval.n_seeds));
  cfg.eval.n_primers = static_cast<int>(eval.integer("n_primers", cfg.eval.n_primers));
  cfg.eval.mask_fraction = eval.number("mask_fraction", cfg.eval.mask_fraction);
  cfg.eval.max_span = static_cast<int>(eval.integer("max_span", cfg.eval.max_span));
  cfg.eval.beam = static_cast<int>(eval.integer("beam", cfg.eval.beam));
  cfg.eval.top_k = static_cast<int>(eval.integer("top_k", cfg.eval.top_k));
  cfg.eval.segment = static_cast<int>(eval.integer("segment", cfg.eval.segment));
  cfg.eval.with_property = eval.boolean("with_property", cfg.eval.with_property);
  cfg.eval.boost = eval.number("boost", cfg.eval.boost);
  cfg.eval.delta = eval.number("delta", cfg.eval.delta);
  cfg.eval.primer = eval.number("primer", cfg.eval.primer);
  cfg.eval.pool = static_cast<int>(eval.integer("pool", cfg.eval.pool));
  cfg.eval.fractions = eval.numbers("fractions", cfg.eval.fractions);
  cfg.eval.spans = eval.integers("spans", cfg.eval.spans);
  cfg.eval.k = static_cast<int>(eval.integer("k", cfg.eval.k));
  cfg.eval.distance = eval.str("distance", cfg.eval.distance);
  eval.reject_leftovers();
  if (cfg.eval.split != "train" && cfg.eval.split != "valid" && cfg.eval.split != "test" &&
      cfg.eval.split != "all")
    throw ConfigError("eval.split: expected train/valid/test/all, got " + cfg.eval.split);
  if (cfg.eval.oracle != "synthetic" && cfg.eval.oracle != "self")
    throw ConfigError("eval.oracle: expected synthetic/self, got " + cfg.eval.oracle);
  knn_distance_from_string(cfg.eval.distance);

  SectionView decode = view("decode");
  cfg.decode.beam = static_cast<int>(decode.integer("beam", cfg.decode.beam));
  cfg.decode.mask_fraction = decode.number("mask_fraction", cfg.decode.mask_fraction);
  cfg.decode.max_span = static_cast<int>(decode.integer("max_span", cfg.decode.max_span));
  decode.reject_leftovers();

  return cfg;
}

uint64_t resolve_seed(const ArgSet& a, const std::optional<uint64_t>& cfg_seed) {
  if (a.has("seed")) return parse_u64(a.get("seed"), "--seed");
  if (cfg_seed) return *cfg_seed;
  if (const char* env = std::getenv("REGRESSFORMER_SEED")) return parse_u64(env, "REGRESSFORMER_SEED");
  return 0x5eed;
}

// ------------------------------------------------------------ data pipeline

std::string sole_property(const Dataset& ds) {
  std::set<std::string> names;
  for (const Example& ex : ds)
    for (const auto& [k, v] : ex.props) names.insert(k);
  if (names.size() != 1)
    throw ConfigError("data.property is required when the dataset does not have exactly one property");
  return *names.begin();
}

struct Prepared {
  Dataset full;  // normalized (and jittered) dataset before splitting
  SplitResult split;
  std::string property;
  std::optional<SynthKind> kind;  // set for synthetic data
  uint64_t data_hash = 0;
};

Prepared prepare_data(const RunCfg& cfg, uint64_t seed) {
  const DataCfg& d = cfg.data;
  if (!d.kind.empty() && !d.path.empty())
    throw ConfigError("data.kind and data.path are mutually exclusive");

  Prepared out;
  Dataset ds;
  if (!d.kind.empty()) {
    out.kind = synth_kind_from_string(d.kind);
    ds = synth_generate(*out.kind, d.n, d.len, d.alphabet, derive_seed(seed, "data"));
    out.property = d.property.empty() ? synth_property_name(*out.kind) : d.property;
  } else if (!d.path.empty()) {
    ds = load_dataset(d.path, d.format == "csv" ? DataFormat::CSV : DataFormat::JSONL);
    out.property = d.property.empty() ? sole_property(ds) : d.property;
  } else {
    throw ConfigError("config needs data.kind or data.path");
  }

  ds = normalize_property(ds, out.property, {d.lo, d.hi}, d.decimals);
  if (d.jitter_sigma > 0)
    ds = jitter_labels(ds, out.property, d.jitter_sigma, d.jitter_threshold, d.decimals,
                       derive_seed(seed, "jitter"));
  out.data_hash = dataset_hash(ds);
  out.split = split_dataset(ds, d.train, d.valid, d.test, derive_seed(seed, "split"));
  out.full = std::move(ds);
  return out;
}

const Dataset& pick_split(const Prepared& data, const std::string& which) {
  if (which == "train") return data.split.train;
  if (which == "valid") return data.split.valid;
  if (which == "test") return data.split.test;
  return data.full;
}

// examples without explicit segments fall back to the thirds grid
Dataset with_default_segments(const Dataset& ds) {
  Dataset out = ds;
  for (Example& ex : out)
    if (ex.segments.empty()) ex.segments = default_segments(static_cast<int>(ex.tokens.size()));
  return out;
}

void write_text(const std::string& path, const std::string& text, const std::string& what) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(what + ": cannot open " + path + " for writing");
  out << text;
  if (!out) throw DataError(what + ": write failed: " + path);
}

// report destination: --out file, else stdout
void emit(const ArgSet& a, const std::string& text) {
  if (a.has("out"))
    write_text(a.get("out"), text, "output");
  else
    std::cout << text;
}

// --------------------------------------------------------------- tokenize

int cmd_tokenize(const ArgSet& a) {
  const std::string in_path = a.get("in");
  const std::string vocab_path = a.get("vocab");
  const std::string out_path = a.get("out");
  const std::string split = a.get_or("split", "chars");
  if (split != "chars" && split != "ws")
    throw ConfigError("--split: expected chars or ws, got " + split);
  const bool split_ws = split == "ws";

  std::ifstream in(in_path);
  if (!in) throw DataError("cannot open corpus: " + in_path);

  // pass 1: parse every line, recording schema evidence and text symbols
  std::vector<std::pair<int, RawLine>> lines;  // line number, parsed line
  std::map<std::string, PropertySchema> schemas;
  std::vector<std::string> schema_order;
  std::set<std::string> symbols;
  std::string raw;
  int lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    if (raw.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto at_line = [&](const std::string& msg) { return "line " + std::to_string(lineno) + ": " + msg; };
    RawLine line;
    try {
      line = parse_raw_line(raw, split_ws);
      for (const auto& [name, num] : line.props)
        detokenize_number(tokenize_number(num));  // validate the numeral early
    } catch (const NumericError& e) {
      throw MalformedNumber(at_line(e.what()));
    }
    for (const auto& [name, num] : line.props) {
      std::string body = num[0] == '-' || num[0] == '+' ? num.substr(1) : num;
      size_t dot = body.find('.');
      int int_digits = static_cast<int>(dot == std::string::npos ? body.size() : dot);
      int frac_digits = static_cast<int>(dot == std::string::npos ? 0 : body.size() - dot - 1);
      auto [it, fresh] = schemas.try_emplace(name, PropertySchema{name, int_digits, frac_digits, num[0] == '-'});
      if (fresh) {
        schema_order.push_back(name);
      } else {
        it->second.int_digits = std::max(it->second.int_digits, int_digits);
        it->second.frac_digits = std::max(it->second.frac_digits, frac_digits);
        it->second.sign_allowed = it->second.sign_allowed || num[0] == '-';
      }
    }
    for (const std::string& s : line.text) symbols.insert(s);
    lines.emplace_back(lineno, std::move(line));
  }

  // an existing vocabulary wins, which keeps re-runs and cross-run ids stable
  Vocabulary vocab;
  if (fs::exists(vocab_path)) {
    vocab = Vocabulary::load_file(vocab_path);
  } else {
    VocabularySchema schema;
    for (const std::string& name : schema_order) schema.properties.push_back(schemas.at(name));
    vocab = Vocabulary::build(std::move(schema),
                              std::vector<std::string>(symbols.begin(), symbols.end()));
    vocab.save_file(vocab_path);
  }

  std::ostringstream out;
  for (const auto& [no, line] : lines) {
    json ids = json::array();
    try {
      for (const Token& t : line_tokens(line, vocab.schema().places)) ids.push_back(vocab.id(t));
    } catch (const NumericError& e) {
      throw MalformedNumber("line " + std::to_string(no) + ": " + e.what());
    } catch (const DataError& e) {
      throw DataError("line " + std::to_string(no) + ": " + e.what());
    }
    out << json{{"ids", std::move(ids)}}.dump() << "\n";
  }
  write_text(out_path, out.str(), "token output");
  return 0;
}

// ------------------------------------------------------------------- train

int cmd_train(const ArgSet& a) {
  RunCfg cfg = parse_run_config(a.get("config"));
  if (a.has("out")) cfg.out = a.get("out");
  if (a.has("steps")) cfg.trainer.total_steps = parse_ll(a.get("steps"), "--steps");
  const uint64_t seed = resolve_seed(a, cfg.seed);
  cfg.trainer.seed = seed;
  const bool resume = a.has("resume");

  Prepared data = prepare_data(cfg, seed);

  fs::create_directories(cfg.out);
  const std::string ckpt_path = cfg.out + "/ckpt.bin";
  const std::string vocab_path = cfg.out + "/vocab.json";

  Vocabulary vocab;
  if (resume) {
    if (!fs::exists(ckpt_path)) throw ConfigError("--resume: no checkpoint at " + ckpt_path);
    vocab = Vocabulary::load_file(vocab_path);
  } else {
    vocab = build_vocabulary(data.full, cfg.data.decimals);
    vocab.save_file(vocab_path);
  }
  cfg.model.vocab_size = vocab.size();

  const std::vector<TokenizedSequence> train = encode_dataset(data.split.train, vocab);
  const std::vector<TokenizedSequence> valid = encode_dataset(data.split.valid, vocab);

  const auto mode = resume ? std::ios::app : std::ios::trunc;
  std::ofstream log(cfg.out + "/log.jsonl", mode);
  if (!log) throw DataError("cannot open training log in " + cfg.out);

  Trainer trainer = resume ? Trainer::resume(ckpt_path, vocab, cfg.trainer)
                           : Trainer(vocab, cfg.model, cfg.trainer);

  std::ofstream eval_log;
  Trainer::EvalFn on_eval;
  if (cfg.trainer.eval_every > 0 && !valid.empty()) {
    eval_log.open(cfg.out + "/eval.jsonl", mode);
    if (!eval_log) throw DataError("cannot open eval log in " + cfg.out);
    on_eval = [&](long long step, const Params& p) {
      RegressionResult r = regression_eval(p, trainer.tables(), vocab, valid, data.property);
      json rec{{"step", step}, {"rmse", r.rmse}};
      rec["spearman"] = r.spearman.degenerate ? json() : json(r.spearman.value);
      eval_log << rec.dump() << "\n" << std::flush;
      if (cfg.stop_rmse <= 0 && cfg.stop_rho <= 0) return false;
      bool stop = true;
      if (cfg.stop_rmse > 0) stop = stop && r.rmse <= cfg.stop_rmse;
      if (cfg.stop_rho > 0)
        stop = stop && !r.spearman.degenerate && r.spearman.value >= cfg.stop_rho;
      return stop;
    };
  }

  trainer.run(train, &log, on_eval, ckpt_path);
  trainer.save(ckpt_path);

  double final_loss = 0.0;
  const auto& hist = trainer.history();
  const size_t tail = std::min<size_t>(hist.size(), 20);
  for (size_t i = hist.size() - tail; i < hist.size(); ++i) final_loss += hist[i].loss;
  if (tail) final_loss /= static_cast<double>(tail);

  json report{{"id", cfg.id},
              {"command", "train"},
              {"config_hash", hex64(cfg.hash)},
              {"dataset_hash", hex64(data.data_hash)},
              {"vocab_hash", hex64(vocab.hash())},
              {"seed", seed},
              {"property", data.property},
              {"train_n", data.split.train.size()},
              {"valid_n", data.split.valid.size()},
              {"test_n", data.split.test.size()},
              {"steps", trainer.step()},
              {"final_loss", final_loss}};
  write_text(cfg.out + "/report.json", report.dump(2) + "\n", "report");
  std::cout << "trained to step " << trainer.step() << "; artifacts in " << cfg.out << "\n";
  return 0;
}

// --------------------------------------------------- checkpoint-based setup

struct Loaded {
  Vocabulary vocab;
  Params params;
  TablesT<float> tables;
};

Loaded load_model(const std::string& ckpt_path, const std::string& vocab_path) {
  Loaded out;
  out.vocab = Vocabulary::load_file(vocab_path);
  CheckpointMeta meta;
  out.params = load_checkpoint(ckpt_path, &meta);
  if (meta.vocab_hash != out.vocab.hash())
    throw DataError("vocabulary does not match the checkpoint");
  out.tables = build_tables<float>(out.params.cfg, out.vocab);
  return out;
}

std::string default_vocab_path(const ArgSet& a) {
  if (a.has("vocab")) return a.get("vocab");
  return (fs::path(a.get("ckpt")).parent_path() / "vocab.json").string();
}

std::string resolve_eval_property(const Vocabulary& vocab, const std::string& name) {
  if (!name.empty()) return name;
  if (vocab.schema().properties.size() != 1)
    throw ConfigError("--property is required when the vocabulary has several properties");
  return vocab.schema().properties[0].name;
}

// ----------------------------------------------------------------- predict

int cmd_predict(const ArgSet& a) {
  Loaded m = load_model(a.get("ckpt"), default_vocab_path(a));
  const std::string prop = resolve_eval_property(m.vocab, a.get_or("property", ""));

  const std::string in_path = a.get("in");
  const bool csv = in_path.size() > 4 && in_path.rfind(".csv") == in_path.size() - 4;
  Dataset ds = load_dataset(in_path, csv ? DataFormat::CSV : DataFormat::JSONL);

  std::ostringstream out;
  for (const Example& ex : ds) {
    // a placeholder value when the label is absent; the block is masked anyway
    std::map<std::string, double> props = ex.props;
    props.emplace(prop, 0.0);
    TokenizedSequence seq = mask_property_block(encode_sequence(props, ex.tokens, m.vocab), prop);
    PropertyPrediction pred = predict_property(m.params, m.tables, m.vocab, seq);
    json slots = json::array();
    for (const SlotDistribution& s : pred.slots) slots.push_back(s.entropy());
    out << json{{"property", prop},
                {"value", pred.values.at(prop).value()},
                {"entropy", pred.mean_entropy},
                {"slots", std::move(slots)}}
               .dump()
        << "\n";
  }
  emit(a, out.str());
  return 0;
}

// ---------------------------------------------------------------- generate

int cmd_generate(const ArgSet& a) {
  DecodeCfg dc;
  std::optional<uint64_t> cfg_seed;
  if (a.has("config")) {
    RunCfg cfg = parse_run_config(a.get("config"));
    dc = cfg.decode;
    cfg_seed = cfg.seed;
  }
  const double fraction = a.has("mask-fraction")
                              ? parse_num(a.get("mask-fraction"), "--mask-fraction")
                              : dc.mask_fraction;
  const int span = a.has("max-span") ? parse_int(a.get("max-span"), "--max-span") : dc.max_span;
  const int beam = a.has("beam") ? parse_int(a.get("beam"), "--beam") : dc.beam;
  const uint64_t seed = resolve_seed(a, cfg_seed);

  const std::string spec = a.get("primer");
  size_t eq = spec.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 == spec.size())
    throw ConfigError("--primer: expected name=value, got " + spec);
  Primer primer{spec.substr(0, eq), parse_num(spec.substr(eq + 1), "--primer value")};

  Loaded m = load_model(a.get("ckpt"), default_vocab_path(a));

  const std::string in_path = a.get("in");
  const bool csv = in_path.size() > 4 && in_path.rfind(".csv") == in_path.size() - 4;
  Dataset ds = load_dataset(in_path, csv ? DataFormat::CSV : DataFormat::JSONL);

  std::ostringstream out;
  long long index = 0;
  for (const Example& ex : ds) {
    std::map<std::string, double> props = ex.props;
    props.emplace(primer.name, primer.value);  // ensure the primed block exists
    TokenizedSequence seq = encode_sequence(props, ex.tokens, m.vocab);
    Rng rng = make_rng(splitmix64(derive_seed(seed, "generate") + static_cast<uint64_t>(index)));
    MaskPlan plan = sample_nonempty_mask_plan(seq.l(), fraction, span, rng);
    DecodeResult res = generate_conditional(m.params, m.tables, m.vocab, seq, primer, plan, beam);

    json cands = json::array();
    for (const auto& [cand, score] : res.sequences) {
      DecodedSequence dec = decode_sequence(cand.ids(m.vocab), m.vocab);
      json props_json = json::object();
      for (const auto& [name, value] : dec.props) props_json[name] = value.value();
      cands.push_back(json{{"text", dec.text}, {"props", std::move(props_json)}, {"score", score}});
    }
    out << json{{"candidates", std::move(cands)}}.dump() << "\n";
    ++index;
  }
  emit(a, out.str());
  return 0;
}

// ---------------------------------------------------------------- evaluate

int cmd_evaluate(const ArgSet& a) {
  RunCfg cfg = parse_run_config(a.get("config"));
  EvalCfg& ev = cfg.eval;
  if (a.has("property")) ev.property = a.get("property");
  if (a.has("split")) ev.split = a.get("split");
  if (a.has("oracle")) ev.oracle = a.get("oracle");
  if (a.has("n-seeds")) ev.n_seeds = parse_int(a.get("n-seeds"), "--n-seeds");
  if (a.has("k")) ev.k = parse_int(a.get("k"), "--k");
  const std::string protocol = a.get("protocol");
  const std::set<std::string> protocols = {"regression", "sweep",       "reconstruct",
                                           "decorate",   "constrained", "knn"};
  if (!protocols.count(protocol)) throw ConfigError("unknown protocol: " + protocol);
  const uint64_t seed = resolve_seed(a, cfg.seed);

  Prepared data = prepare_data(cfg, seed);
  const Dataset& eval_ds = pick_split(data, ev.split);
  if (eval_ds.empty()) throw DataError("evaluation split '" + ev.split + "' is empty");

  json report{{"protocol", protocol},
              {"id", cfg.id},
              {"config_hash", hex64(cfg.hash)},
              {"dataset_hash", hex64(data.data_hash)},
              {"seed", seed}};
  std::string csv_text;

  if (protocol == "knn") {
    RegressionResult r =
        knn_eval(data.split.train, eval_ds, data.property, ev.k, knn_distance_from_string(ev.distance));
    report["property"] = data.property;
    report["n"] = r.n;
    report["metrics"] = json::parse(r.report().to_json());
    csv_text = "gold,pred\n";
    for (size_t i = 0; i < r.golds.size(); ++i)
      csv_text += json(r.golds[i]).dump() + "," + json(r.preds[i]).dump() + "\n";
  } else {
    Loaded m = load_model(a.get("ckpt"), default_vocab_path(a));
    const std::string prop = resolve_eval_property(m.vocab, ev.property.empty() ? data.property : ev.property);
    report["vocab_hash"] = hex64(m.vocab.hash());
    report["property"] = prop;

    // only sweep/decorate/constrained score generations against an oracle
    auto make_oracle = [&]() -> PropertyOracle {
      if (ev.oracle == "self") return self_prediction_oracle(m.params, m.tables, m.vocab, prop);
      if (!data.kind)
        throw ConfigError("the synthetic oracle needs data.kind; use eval.oracle = \"self\"");
      const SynthKind kind = *data.kind;
      const int alphabet = cfg.data.alphabet;
      return [kind, alphabet](const TokenizedSequence& s) {
        return synth_property_of(kind, s, default_segments(s.l()), alphabet);
      };
    };

    const int n_take = std::min<int>(ev.n_seeds, static_cast<int>(eval_ds.size()));

    if (protocol == "regression") {
      RegressionResult r =
          regression_eval(m.params, m.tables, m.vocab, encode_dataset(eval_ds, m.vocab), prop);
      report["n"] = r.n;
      report["metrics"] = json::parse(r.report().to_json());
      csv_text = "gold,pred\n";
      for (size_t i = 0; i < r.golds.size(); ++i)
        csv_text += json(r.golds[i]).dump() + "," + json(r.preds[i]).dump() + "\n";
    } else if (protocol == "sweep") {
      std::vector<TokenizedSequence> seeds =
          encode_dataset(Dataset(eval_ds.begin(), eval_ds.begin() + n_take), m.vocab);
      SweepConfig sc;
      sc.n_primers = ev.n_primers;
      sc.mask_fraction = ev.mask_fraction;
      sc.max_span = ev.max_span;
      sc.beam_width = ev.beam;
      sc.seed = seed;
      sc.property = prop;
      SweepResult r = primer_sweep(m.params, m.tables, m.vocab, seeds,
                                   encode_dataset(data.split.train, m.vocab), make_oracle(), sc);
      report["n"] = seeds.size();
      report["degenerate_seeds"] = r.degenerate;
      report["metrics"] = json::parse(r.report().to_json());
      std::ostringstream csv;
      write_sweep_csv(r, csv);
      csv_text = csv.str();
    } else if (protocol == "reconstruct") {
      ReconstructionConfig rc;
      rc.segment = ev.segment;
      rc.top_k = ev.top_k > 0 ? ev.top_k : 3;
      rc.with_property = ev.with_property;
      Dataset subset = with_default_segments(Dataset(eval_ds.begin(), eval_ds.begin() + n_take));
      ReconstructionResult r = reconstruction_eval(m.params, m.tables, m.vocab, subset, rc);
      report["n"] = r.n;
      report["metrics"] = json::parse(r.report().to_json());
    } else if (protocol == "decorate") {
      DecorationConfig dc;
      dc.segment = ev.segment;
      dc.boost = ev.boost;
      dc.top_k = ev.top_k > 0 ? ev.top_k : 5;
      dc.property = prop;
      Dataset subset = with_default_segments(Dataset(eval_ds.begin(), eval_ds.begin() + n_take));
      DecorationResult r = decoration_eval(m.params, m.tables, m.vocab, subset,
                                           with_default_segments(data.split.train), make_oracle(), dc);
      report["n"] = r.n;
      report["metrics"] = json::parse(r.report().to_json());
    } else {  // constrained
      ConstrainedOptConfig cc;
      cc.pool_size = ev.pool;
      cc.delta = ev.delta;
      cc.primer = ev.primer;
      cc.fractions = ev.fractions;
      cc.spans = ev.spans;
      cc.beam_width = ev.beam;
      cc.seed = seed;
      cc.property = prop;
      TokenizedSequence seed_seq = encode_dataset({eval_ds.front()}, m.vocab).front();
      ConstrainedOptResult r = constrained_optimization(m.params, m.tables, m.vocab, seed_seq, cc,
                                                        make_oracle(), text_similarity);
      report["n"] = 1;
      report["seed_property"] = r.seed_property;
      report["best_property"] = r.best_property;
      report["qualified"] = r.qualified;
      report["best"] = render_line(decode_sequence(r.best.ids(m.vocab), m.vocab));
      report["metrics"] = json::parse(r.report().to_json());
    }
  }

  if (a.has("csv")) {
    if (csv_text.empty())
      throw ConfigError("no csv plot data for protocol " + protocol);
    write_text(a.get("csv"), csv_text, "csv output");
  }
  emit(a, report.dump(2) + "\n");
  return 0;
}

// ------------------------------------------------------------------- usage

const char* kUsage = R"(usage: rt <command> [flags]

commands:
  tokenize  --in FILE --vocab FILE --out FILE [--split chars|ws]
            stream-tokenize a corpus of "<name>value|text" lines into ids;
            builds the vocabulary unless --vocab already exists
  train     --config FILE [--resume] [--seed N] [--steps N] [--out DIR]
            train per config; writes ckpt.bin, vocab.json, log.jsonl, report.json
  predict   --ckpt FILE --in FILE [--vocab FILE] [--property NAME] [--out FILE]
            per-line property prediction as JSONL {value, entropy, slots}
  generate  --ckpt FILE --in FILE --primer name=value [--mask-fraction F]
            [--max-span N] [--beam N] [--vocab FILE] [--config FILE]
            [--seed N] [--out FILE]
            conditional generation as JSONL {candidates: [{text, props, score}]}
  evaluate  --config FILE --protocol P [--ckpt FILE] [--vocab FILE] [--csv FILE]
            [--property NAME] [--split train|valid|test|all] [--oracle synthetic|self]
            [--n-seeds N] [--k N] [--seed N] [--out FILE]
            protocols: regression, sweep, reconstruct, decorate, constrained, knn

seed precedence: --seed, then [run].seed, then $REGRESSFORMER_SEED, then 0x5eed.
exit codes: 0 ok, 2 usage/config error, 3 data error, 4 numeric failure.
)";

int dispatch(int argc, char** argv) {
  if (argc < 2) {
    std::cerr << kUsage;
    return 2;
  }
  const std::string cmd = argv[1];
  if (cmd == "--help" || cmd == "help") {
    std::cout << kUsage;
    return 0;
  }
  for (int i = 2; i < argc; ++i)
    if (std::string(argv[i]) == "--help") {
      std::cout << kUsage;
      return 0;
    }

  if (cmd == "tokenize")
    return cmd_tokenize(parse_flags(argc, argv, 2, {"in", "vocab", "out", "split"}, {}));
  if (cmd == "train")
    return cmd_train(parse_flags(argc, argv, 2, {"config", "seed", "steps", "out"}, {"resume"}));
  if (cmd == "predict")
    return cmd_predict(parse_flags(argc, argv, 2, {"ckpt", "vocab", "in", "out", "property"}, {}));
  if (cmd == "generate")
    return cmd_generate(parse_flags(argc, argv, 2,
                                    {"ckpt", "vocab", "in", "out", "primer", "mask-fraction",
                                     "max-span", "beam", "config", "seed"},
                                    {}));
  if (cmd == "evaluate")
    return cmd_evaluate(parse_flags(argc, argv, 2,
                                    {"config", "ckpt", "vocab", "protocol", "csv", "out",
                                     "property", "split", "oracle", "n-seeds", "k", "seed"},
                                    {}));
  std::cerr << "unknown command: " << cmd << "\n" << kUsage;
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return dispatch(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
