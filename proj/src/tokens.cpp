#include "rt/tokens.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "rt/rng.hpp"

namespace rt {

using ordered_json = nlohmann::ordered_json;

Token Token::numeric(int v, int p) {
  if (v < 0 || v > 9) throw MalformedNumeral("digit out of range: " + std::to_string(v));
  Token t;
  t.kind = TokenKind::Numeric;
  t.digit = static_cast<int8_t>(v);
  t.place = static_cast<int16_t>(p);
  return t;
}

Token Token::text_sym(std::string s) {
  Token t;
  t.kind = TokenKind::Text;
  t.text = std::move(s);
  return t;
}

Token Token::tag(std::string name) {
  Token t;
  t.kind = TokenKind::PropertyTag;
  t.text = std::move(name);
  return t;
}

std::string Token::render() const {
  switch (kind) {
    case TokenKind::Numeric:
      return std::to_string(int(digit)) + "_" + std::to_string(int(place));
    case TokenKind::Text:
      return text;
    case TokenKind::PropertyTag:
      return "<" + text + ">";
    case TokenKind::Separator:
      return "|";
    case TokenKind::Dot:
      return ".";
    case TokenKind::Negative:
      return "-";
    case TokenKind::Mask:
      return "[MASK]";
    case TokenKind::Pad:
      return "[PAD]";
    case TokenKind::End:
      return "[END]";
  }
  throw Error("unreachable token kind");
}

namespace {

bool parse_int(const std::string& s, size_t from, int& out) {
  if (from >= s.size()) return false;
  size_t i = from;
  bool neg = false;
  if (s[i] == '-') {
    neg = true;
    ++i;
  }
  if (i >= s.size()) return false;
  long v = 0;
  for (; i < s.size(); ++i) {
    if (s[i] < '0' || s[i] > '9') return false;
    v = v * 10 + (s[i] - '0');
    if (v > 32000) return false;
  }
  out = static_cast<int>(neg ? -v : v);
  return true;
}

}  // namespace

Token Token::parse(const std::string& s) {
  if (s == "[PAD]") return pad();
  if (s == "[MASK]") return mask();
  if (s == "[END]") return end();
  if (s == "|") return separator();
  if (s == ".") return dot();
  if (s == "-") return negative();
  if (s.size() >= 3 && s.front() == '<' && s.back() == '>')
    return tag(s.substr(1, s.size() - 2));
  if (s.size() >= 3 && s[0] >= '0' && s[0] <= '9' && s[1] == '_') {
    int p = 0;
    if (parse_int(s, 2, p)) return numeric(s[0] - '0', p);
  }
  if (s.empty()) throw UnknownToken("empty token string");
  return text_sym(s);
}

Vocabulary Vocabulary::build(VocabularySchema schema, const std::vector<std::string>& text_symbols) {
  // widen the place grid to whatever the schemas need
  for (const auto& p : schema.properties) {
    schema.places.p_max = std::max(schema.places.p_max, p.int_digits - 1);
    schema.places.p_min = std::min(schema.places.p_min, -p.frac_digits);
  }
  if (schema.places.p_min > schema.places.p_max)
    throw ConfigError("empty place range");

  Vocabulary v;
  v.schema_ = std::move(schema);
  v.tokens_ = {Token::pad(), Token::mask(), Token::end(),
               Token::separator(), Token::dot(), Token::negative()};
  for (const auto& p : v.schema_.properties) v.tokens_.push_back(Token::tag(p.name));
  v.numeric_base_ = static_cast<int>(v.tokens_.size());
  for (int p = v.schema_.places.p_max; p >= v.schema_.places.p_min; --p)
    for (int d = 0; d <= 9; ++d) v.tokens_.push_back(Token::numeric(d, p));
  for (const auto& s : text_symbols) {
    Token t = Token::parse(s);
    if (t.kind != TokenKind::Text)
      throw ConfigError("text symbol collides with a reserved form: " + s);
    v.tokens_.push_back(std::move(t));
  }
  v.index_tokens();
  return v;
}

void Vocabulary::index_tokens() {
  id_by_render_.clear();
  text_ids_.clear();
  for (int i = 0; i < static_cast<int>(tokens_.size()); ++i) {
    auto [it, fresh] = id_by_render_.emplace(tokens_[i].render(), i);
    if (!fresh) throw ConfigError("duplicate token: " + tokens_[i].render());
    if (tokens_[i].kind == TokenKind::Text) text_ids_.push_back(i);
  }
}

const Token& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw UnknownId("token id out of range: " + std::to_string(id));
  return tokens_[id];
}

int Vocabulary::id(const Token& t) const {
  auto it = id_by_render_.find(t.render());
  if (it == id_by_render_.end()) throw UnknownToken("token not in vocabulary: " + t.render());
  return it->second;
}

bool Vocabulary::contains(const Token& t) const {
  return id_by_render_.count(t.render()) > 0;
}

const PropertySchema& Vocabulary::property(const std::string& name) const {
  for (const auto& p : schema_.properties)
    if (p.name == name) return p;
  throw UnknownProperty("unknown property: " + name);
}

bool Vocabulary::has_property(const std::string& name) const {
  for (const auto& p : schema_.properties)
    if (p.name == name) return true;
  return false;
}

int Vocabulary::numeric_id(int v, int p) const {
  if (v < 0 || v > 9 || !schema_.places.contains(p))
    throw PlaceOutOfRange("no numeric token for " + std::to_string(v) + "_" + std::to_string(p));
  return numeric_base_ + (schema_.places.p_max - p) * 10 + v;
}

void Vocabulary::save(std::ostream& os) const {
  ordered_json props = ordered_json::array();
  for (const auto& p : schema_.properties) {
    props.push_back({{"name", p.name},
                     {"int_digits", p.int_digits},
                     {"frac_digits", p.frac_digits},
                     {"sign_allowed", p.sign_allowed}});
  }
  ordered_json toks = ordered_json::array();
  for (const auto& t : tokens_) toks.push_back(t.render());
  ordered_json j = {{"schema",
                     {{"properties", std::move(props)},
                      {"p_min", schema_.places.p_min},
                      {"p_max", schema_.places.p_max}}},
                    {"tokens", std::move(toks)}};
  os << j.dump(2) << "\n";
}

std::string Vocabulary::save_string() const {
  std::ostringstream os;
  save(os);
  return os.str();
}

Vocabulary Vocabulary::load(std::istream& is) {
  ordered_json j;
  try {
    is >> j;
  } catch (const std::exception& e) {
    throw DataError(std::string("bad vocabulary json: ") + e.what());
  }
  Vocabulary v;
  try {
    const auto& s = j.at("schema");
    v.schema_.places.p_min = s.at("p_min").get<int>();
    v.schema_.places.p_max = s.at("p_max").get<int>();
    for (const auto& p : s.at("properties")) {
      PropertySchema ps;
      ps.name = p.at("name").get<std::string>();
      ps.int_digits = p.at("int_digits").get<int>();
      ps.frac_digits = p.at("frac_digits").get<int>();
      ps.sign_allowed = p.at("sign_allowed").get<bool>();
      v.schema_.properties.push_back(std::move(ps));
    }
    for (const auto& t : j.at("tokens")) v.tokens_.push_back(Token::parse(t.get<std::string>()));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("bad vocabulary json: ") + e.what());
  }
  if (v.tokens_.size() < 6) throw DataError("vocabulary missing reserved tokens");
  for (int i = 0; i < static_cast<int>(v.tokens_.size()); ++i) {
    if (v.tokens_[i].kind == TokenKind::Numeric && v.numeric_base_ == 0 &&
        v.tokens_[i].digit == 0 && v.tokens_[i].place == v.schema_.places.p_max)
      v.numeric_base_ = i;
  }
  v.index_tokens();
  // trust but verify the canonical layout the builder writes
  const char* expect[] = {"[PAD]", "[MASK]", "[END]", "|", ".", "-"};
  for (int i = 0; i < 6; ++i)
    if (v.tokens_[i].render() != expect[i])
      throw DataError("vocabulary reserved tokens out of order");
  return v;
}

Vocabulary Vocabulary::load_string(const std::string& s) {
  std::istringstream is(s);
  return load(is);
}

void Vocabulary::save_file(const std::string& path) const {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write vocabulary: " + path);
  save(os);
}

Vocabulary Vocabulary::load_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read vocabulary: " + path);
  return load(is);
}

uint64_t Vocabulary::hash() const { return fnv1a64(save_string()); }

std::vector<int> TokenizedSequence::ids(const Vocabulary& v) const {
  std::vector<int> out;
  out.reserve(T());
  for (const auto& t : prop) out.push_back(v.id(t));
  for (const auto& t : text) out.push_back(v.id(t));
  return out;
}

std::vector<int> TokenizedSequence::numeral_positions() const {
  std::vector<int> out;
  for (const auto& b : scan_property_blocks(*this))
    for (int i = b.first; i < b.last; ++i) out.push_back(i);
  return out;
}

std::vector<PropertyBlock> scan_property_blocks(const TokenizedSequence& seq) {
  std::vector<PropertyBlock> blocks;
  int i = 0;
  const int k = seq.k();
  while (i < k) {
    if (seq.prop[i].kind != TokenKind::PropertyTag)
      throw MalformedNumeral("property block must start with a tag at position " + std::to_string(i));
    PropertyBlock b;
    b.name = seq.prop[i].text;
    b.tag_pos = i;
    b.first = ++i;
    while (i < k && seq.prop[i].kind != TokenKind::Separator) {
      switch (seq.prop[i].kind) {
        case TokenKind::Numeric:
        case TokenKind::Dot:
        case TokenKind::Negative:
        case TokenKind::Mask:
          ++i;
          break;
        default:
          throw MalformedNumeral("unexpected token inside property block: " + seq.prop[i].render());
      }
    }
    if (i >= k) throw MalformedNumeral("property block missing separator");
    b.last = i;
    if (b.last == b.first) throw MalformedNumeral("empty property block: " + b.name);
    ++i;  // separator
    blocks.push_back(std::move(b));
  }
  return blocks;
}

}  // namespace rt
