#include "rt/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numeric>
#include <set>
#include <sstream>

#include "rt/errors.hpp"
#include "rt/tokenizer.hpp"

namespace rt {

using ordered_json = nlohmann::ordered_json;
using nlohmann::json;

namespace {

[[noreturn]] void line_error(size_t line, const std::string& what) {
  throw DataError("line " + std::to_string(line) + ": " + what);
}

void validate_example(const Example& ex, size_t line) {
  if (ex.tokens.empty()) line_error(line, "tokens must be nonempty");
  for (const std::string& t : ex.tokens)
    if (t.empty()) line_error(line, "empty token symbol");
  const int len = static_cast<int>(ex.tokens.size());
  for (const auto& [s, e] : ex.segments)
    if (s < 0 || s >= e || e > len) line_error(line, "segment out of range");
  for (const auto& [name, v] : ex.props) {
    if (name.empty()) line_error(line, "empty property name");
    if (!std::isfinite(v)) line_error(line, "property " + name + " is not finite");
  }
}

double pow10d(int d) {
  double p = 1.0;
  for (int i = 0; i < d; ++i) p *= 10.0;
  return p;
}

void check_decimals(int d) {
  if (d < 1 || d > 9) throw ConfigError("decimals must lie in 1..9");
}

std::string letter(int i) { return std::string(1, static_cast<char>('A' + i)); }

// index of the (single-letter) symbol within the first `alphabet` letters
int letter_index(const std::string& tok, int alphabet, size_t line) {
  if (tok.size() != 1 || tok[0] < 'A' || tok[0] >= 'A' + alphabet)
    line_error(line, "token " + tok + " outside the first " + std::to_string(alphabet) +
                         " letters");
  return tok[0] - 'A';
}

void check_alphabet(int alphabet) {
  if (alphabet < 2 || alphabet > 26) throw ConfigError("alphabet size must lie in 2..26");
}

}  // namespace

Dataset load_jsonl(std::istream& is) {
  Dataset ds;
  std::string line;
  size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      line_error(lineno, e.what());
    }
    if (!j.is_object()) line_error(lineno, "record is not an object");
    Example ex;
    for (const auto& [key, val] : j.items()) {
      if (key == "tokens") {
        if (!val.is_array()) line_error(lineno, "tokens must be an array");
        for (const auto& t : val) {
          if (!t.is_string()) line_error(lineno, "tokens must be strings");
          ex.tokens.push_back(t.get<std::string>());
        }
      } else if (key == "segments") {
        if (!val.is_array()) line_error(lineno, "segments must be an array");
        for (const auto& s : val) {
          if (!s.is_array() || s.size() != 2 || !s[0].is_number_integer() ||
              !s[1].is_number_integer())
            line_error(lineno, "each segment must be an [start, end] pair");
          ex.segments.emplace_back(s[0].get<int>(), s[1].get<int>());
        }
      } else if (key == "props") {
        if (!val.is_object()) line_error(lineno, "props must be an object");
        for (const auto& [name, v] : val.items()) {
          if (!v.is_number()) line_error(lineno, "property " + name + " must be a number");
          ex.props[name] = v.get<double>();
        }
      } else {
        line_error(lineno, "unknown key " + key);
      }
    }
    validate_example(ex, lineno);
    ds.push_back(std::move(ex));
  }
  return ds;
}

void save_jsonl(const Dataset& ds, std::ostream& os) {
  for (const Example& ex : ds) {
    ordered_json j;
    j["tokens"] = ex.tokens;
    if (!ex.segments.empty()) {
      ordered_json segs = ordered_json::array();
      for (const auto& [s, e] : ex.segments) segs.push_back({s, e});
      j["segments"] = segs;
    }
    ordered_json props = ordered_json::object();
    for (const auto& [name, v] : ex.props) props[name] = v;
    j["props"] = props;
    os << j.dump() << '\n';
  }
}

Dataset load_csv(std::istream& is) {
  Dataset ds;
  std::string line;
  size_t lineno = 0;
  std::vector<std::string> cols;
  auto fields = [](const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
      if (c == ',') {
        out.push_back(cur);
        cur.clear();
      } else if (c != '\r') {
        cur.push_back(c);
      }
    }
    out.push_back(cur);
    return out;
  };
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::vector<std::string> f = fields(line);
    if (cols.empty()) {
      cols = f;
      if (cols.empty() || cols[0] != "tokens") line_error(lineno, "header must start with tokens");
      continue;
    }
    if (f.size() != cols.size()) line_error(lineno, "wrong number of columns");
    Example ex;
    std::istringstream ts(f[0]);
    std::string tok;
    while (ts >> tok) ex.tokens.push_back(tok);
    for (size_t i = 1; i < cols.size(); ++i) {
      try {
        size_t used = 0;
        const double v = std::stod(f[i], &used);
        if (used != f[i].size()) throw std::invalid_argument("trailing characters");
        ex.props[cols[i]] = v;
      } catch (const std::exception&) {
        line_error(lineno, "bad number in column " + cols[i]);
      }
    }
    validate_example(ex, lineno);
    ds.push_back(std::move(ex));
  }
  return ds;
}

void save_csv(const Dataset& ds, std::ostream& os) {
  std::set<std::string> names;
  for (const Example& ex : ds)
    for (const auto& [name, v] : ex.props) names.insert(name);
  os << "tokens";
  for (const std::string& n : names) os << ',' << n;
  os << '\n';
  for (const Example& ex : ds) {
    if (!ex.segments.empty()) throw DataError("csv cannot carry segments; use jsonl");
    std::string joined;
    for (size_t i = 0; i < ex.tokens.size(); ++i) {
      const std::string& t = ex.tokens[i];
      if (t.find_first_of(", \t\"") != std::string::npos)
        throw DataError("token " + t + " cannot be written to csv");
      if (i) joined.push_back(' ');
      joined += t;
    }
    os << joined;
    for (const std::string& n : names) {
      auto it = ex.props.find(n);
      if (it == ex.props.end()) throw DataError("example lacks property " + n);
      os << ',' << json(it->second).dump();
    }
    os << '\n';
  }
}

Dataset load_dataset(const std::string& path, DataFormat fmt) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open " + path);
  return fmt == DataFormat::JSONL ? load_jsonl(is) : load_csv(is);
}

void save_dataset(const Dataset& ds, const std::string& path, DataFormat fmt) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open " + path + " for writing");
  fmt == DataFormat::JSONL ? save_jsonl(ds, os) : save_csv(ds, os);
  if (!os) throw DataError("failed writing " + path);
}

uint64_t dataset_hash(const Dataset& ds) {
  std::ostringstream os;
  save_jsonl(ds, os);
  return fnv1a64(os.str());
}

double normalize_value(double x, NormRange r, int d) {
  check_decimals(d);
  if (!(r.hi > r.lo)) throw ConfigError("normalization range must have hi > lo");
  double y = (x - r.lo) / (r.hi - r.lo);
  y = std::clamp(y, 0.0, 1.0);
  const double p = pow10d(d);
  return std::llround(y * p) / p;
}

double denormalize_value(double y, NormRange r) {
  if (!(r.hi > r.lo)) throw ConfigError("normalization range must have hi > lo");
  return r.lo + y * (r.hi - r.lo);
}

Dataset normalize_property(const Dataset& ds, const std::string& prop, NormRange r, int d) {
  Dataset out = ds;
  for (Example& ex : out) {
    auto it = ex.props.find(prop);
    if (it == ex.props.end()) throw DataError("example lacks property " + prop);
    it->second = normalize_value(it->second, r, d);
  }
  return out;
}

const char* to_string(SynthKind k) {
  switch (k) {
    case SynthKind::FractionOfA:
      return "FRACTION_OF_A";
    case SynthKind::WeightedSum:
      return "WEIGHTED_SUM";
    default:
      return "SEGMENTED_YIELD";
  }
}

SynthKind synth_kind_from_string(const std::string& s) {
  if (s == "FRACTION_OF_A") return SynthKind::FractionOfA;
  if (s == "WEIGHTED_SUM") return SynthKind::WeightedSum;
  if (s == "SEGMENTED_YIELD") return SynthKind::SegmentedYield;
  throw ConfigError("unknown synthetic dataset kind: " + s);
}

const char* synth_property_name(SynthKind k) {
  switch (k) {
    case SynthKind::FractionOfA:
      return "frac_a";
    case SynthKind::WeightedSum:
      return "wsum";
    default:
      return "yield";
  }
}

std::vector<std::pair<int, int>> default_segments(int len) {
  if (len < 3) throw ConfigError("segmented sequences need length >= 3");
  const int a = len / 3, b = 2 * len / 3;
  return {{0, a}, {a, b}, {b, len}};
}

double synth_property(SynthKind kind, const std::vector<std::string>& tokens,
                      const std::vector<std::pair<int, int>>& segments, int alphabet) {
  check_alphabet(alphabet);
  if (tokens.empty()) throw DataError("empty text");
  const double len = static_cast<double>(tokens.size());
  switch (kind) {
    case SynthKind::FractionOfA: {
      double a = 0;
      for (const std::string& t : tokens) a += t == "A";
      return a / len;
    }
    case SynthKind::WeightedSum: {
      // per-token weight spread over [0,1]: first letter 0, last letter 1
      double s = 0;
      for (const std::string& t : tokens)
        s += static_cast<double>(letter_index(t, alphabet, 0)) / (alphabet - 1);
      return s / len;
    }
    default: {
      std::vector<std::pair<int, int>> segs =
          segments.empty() ? default_segments(static_cast<int>(tokens.size())) : segments;
      if (alphabet < static_cast<int>(segs.size()))
        throw ConfigError("alphabet too small for one favored letter per segment");
      double total = 0;
      for (size_t s = 0; s < segs.size(); ++s) {
        const auto [b, e] = segs[s];
        if (b < 0 || b >= e || e > static_cast<int>(tokens.size()))
          throw DataError("segment out of range");
        const std::string fav = letter(static_cast<int>(s));
        double hit = 0;
        for (int i = b; i < e; ++i) hit += tokens[static_cast<size_t>(i)] == fav;
        total += hit / (e - b);
      }
      return total / static_cast<double>(segs.size());
    }
  }
}

double synth_property_of(SynthKind kind, const TokenizedSequence& seq,
                         const std::vector<std::pair<int, int>>& segments, int alphabet) {
  std::vector<std::string> tokens;
  tokens.reserve(static_cast<size_t>(seq.l()));
  for (const Token& t : seq.text) {
    if (t.kind != TokenKind::Text) throw DataError("non-text token in scored sequence");
    tokens.push_back(t.text);
  }
  return synth_property(kind, tokens, segments, alphabet);
}

Dataset synth_generate(SynthKind kind, int n, int len, int alphabet, uint64_t seed) {
  check_alphabet(alphabet);
  if (n < 0) throw ConfigError("n must be >= 0");
  if (len < 1) throw ConfigError("len must be >= 1");
  Rng rng = make_rng(derive_seed(seed, "synth"));
  Dataset ds;
  ds.reserve(static_cast<size_t>(n));
  const std::vector<std::pair<int, int>> segs =
      kind == SynthKind::SegmentedYield ? default_segments(len) : std::vector<std::pair<int, int>>{};

  for (int i = 0; i < n; ++i) {
    Example ex;
    ex.tokens.resize(static_cast<size_t>(len));
    switch (kind) {
      case SynthKind::FractionOfA: {
        // target count first, then placement: labels spread uniformly
        std::uniform_int_distribution<int> cnt(0, len);
        std::uniform_int_distribution<int> other(1, alphabet - 1);
        const int a = cnt(rng);
        std::vector<int> pos(static_cast<size_t>(len));
        std::iota(pos.begin(), pos.end(), 0);
        std::shuffle(pos.begin(), pos.end(), rng);
        for (int j = 0; j < len; ++j)
          ex.tokens[static_cast<size_t>(pos[static_cast<size_t>(j)])] =
              j < a ? "A" : letter(other(rng));
        break;
      }
      case SynthKind::WeightedSum: {
        // binomial letters around a uniform mean spread labels over [0,1]
        std::uniform_real_distribution<double> u(0.0, 1.0);
        std::binomial_distribution<int> idx(alphabet - 1, u(rng));
        for (int j = 0; j < len; ++j) ex.tokens[static_cast<size_t>(j)] = letter(idx(rng));
        break;
      }
      default: {
        std::uniform_real_distribution<double> u(0.0, 1.0);
        std::uniform_int_distribution<int> any(0, alphabet - 1);
        for (size_t s = 0; s < segs.size(); ++s) {
          const double q = u(rng);
          std::bernoulli_distribution fav(q);
          for (int j = segs[s].first; j < segs[s].second; ++j) {
            if (fav(rng)) {
              ex.tokens[static_cast<size_t>(j)] = letter(static_cast<int>(s));
            } else {
              int o = any(rng);
              while (o == static_cast<int>(s)) o = any(rng);
              ex.tokens[static_cast<size_t>(j)] = letter(o);
            }
          }
        }
        ex.segments = segs;
        break;
      }
    }
    ex.props[synth_property_name(kind)] = synth_property(kind, ex.tokens, ex.segments, alphabet);
    ds.push_back(std::move(ex));
  }
  return ds;
}

SplitResult split_dataset(const Dataset& ds, double r_train, double r_valid, double r_test,
                          uint64_t seed) {
  if (r_train < 0 || r_valid < 0 || r_test < 0)
    throw ConfigError("split ratios must be nonnegative");
  if (std::abs(r_train + r_valid + r_test - 1.0) > 1e-9)
    throw ConfigError("split ratios must sum to 1");
  const size_t n = ds.size();
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), size_t{0});
  Rng rng = make_rng(derive_seed(seed, "split"));
  std::shuffle(idx.begin(), idx.end(), rng);
  size_t n_train = static_cast<size_t>(std::llround(r_train * static_cast<double>(n)));
  size_t n_valid = static_cast<size_t>(std::llround(r_valid * static_cast<double>(n)));
  n_train = std::min(n_train, n);
  n_valid = std::min(n_valid, n - n_train);
  SplitResult out;
  for (size_t i = 0; i < n; ++i) {
    const Example& ex = ds[idx[i]];
    if (i < n_train)
      out.train.push_back(ex);
    else if (i < n_train + n_valid)
      out.valid.push_back(ex);
    else
      out.test.push_back(ex);
  }
  return out;
}

Dataset jitter_labels(const Dataset& ds, const std::string& prop, double sigma, double threshold,
                      int d, uint64_t seed) {
  check_decimals(d);
  if (sigma < 0) throw ConfigError("sigma must be >= 0");
  if (threshold < 0 || threshold > 1) throw ConfigError("threshold must lie in [0, 1]");
  if (sigma == 0.0 || ds.empty()) return ds;

  const double p = pow10d(d);
  std::map<long long, size_t> freq;
  for (const Example& ex : ds) {
    auto it = ex.props.find(prop);
    if (it == ex.props.end()) throw DataError("example lacks property " + prop);
    ++freq[std::llround(it->second * p)];
  }
  const double n = static_cast<double>(ds.size());
  Dataset out = ds;
  Rng rng = make_rng(derive_seed(seed, "jitter"));
  std::normal_distribution<double> noise(0.0, sigma);
  for (Example& ex : out) {
    double& v = ex.props.at(prop);
    if (static_cast<double>(freq.at(std::llround(v * p))) / n > threshold)
      v = std::llround(std::clamp(v + noise(rng), 0.0, 1.0) * p) / p;
  }
  return out;
}

Vocabulary build_vocabulary(const Dataset& ds, int d) {
  check_decimals(d);
  std::set<std::string> symbols;
  std::set<std::string> names;
  for (const Example& ex : ds) {
    symbols.insert(ex.tokens.begin(), ex.tokens.end());
    for (const auto& [name, v] : ex.props) names.insert(name);
  }
  VocabularySchema schema;
  for (const std::string& n : names) schema.properties.push_back(PropertySchema{n, 1, d, false});
  schema.places = PlaceRange{-d, 0};
  return Vocabulary::build(std::move(schema),
                           std::vector<std::string>(symbols.begin(), symbols.end()));
}

std::vector<TokenizedSequence> encode_dataset(const Dataset& ds, const Vocabulary& vocab) {
  std::vector<TokenizedSequence> out;
  out.reserve(ds.size());
  for (const Example& ex : ds) out.push_back(encode_sequence(ex.props, ex.tokens, vocab));
  return out;
}

Dataset augment(const Dataset& ds, int factor, const Rewriter& rewrite, uint64_t seed) {
  if (factor < 1) throw ConfigError("augmentation factor must be >= 1");
  if (factor > 1 && !rewrite) throw ConfigError("augmentation needs a rewriter");
  Dataset out = ds;
  Rng rng = make_rng(derive_seed(seed, "augment"));
  for (int f = 1; f < factor; ++f)
    for (const Example& ex : ds) {
      Example e2 = ex;
      e2.tokens = rewrite(ex.tokens, rng);
      if (e2.tokens.empty()) throw DataError("rewriter produced empty text");
      out.push_back(std::move(e2));
    }
  return out;
}

}  // namespace rt
