#include "rt/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>

namespace rt {

namespace {

long long pow10ll(int e) {
  long long v = 1;
  for (int i = 0; i < e; ++i) v *= 10;
  return v;
}

}  // namespace

double Decimal::value() const { return static_cast<double>(scaled) / static_cast<double>(pow10ll(scale)); }

std::string Decimal::str() const {
  long long mag = scaled < 0 ? -scaled : scaled;
  std::string digits = std::to_string(mag);
  if (static_cast<int>(digits.size()) <= scale)
    digits.insert(digits.begin(), scale + 1 - digits.size(), '0');
  std::string out = scaled < 0 ? "-" : "";
  out += digits.substr(0, digits.size() - scale);
  if (scale > 0) {
    out += '.';
    out += digits.substr(digits.size() - scale);
  }
  return out;
}

Decimal Decimal::from_value(double v, int scale) {
  return Decimal{std::llround(v * static_cast<double>(pow10ll(scale))), scale};
}

std::vector<TextSegment> split_numerics(std::string_view s) {
  // same segmentation as scanning with the pattern  sign? digits+ dot? digits*
  std::vector<TextSegment> out;
  auto flush_literal = [&](size_t from, size_t to) {
    if (to > from) out.push_back({false, std::string(s.substr(from, to - from))});
  };
  size_t lit_start = 0;
  size_t i = 0;
  auto is_digit = [&](size_t j) { return j < s.size() && s[j] >= '0' && s[j] <= '9'; };
  while (i < s.size()) {
    size_t start = i;
    size_t j = i;
    if (s[j] == '+' || s[j] == '-') ++j;
    if (!is_digit(j)) {
      ++i;
      continue;
    }
    flush_literal(lit_start, start);
    while (is_digit(j)) ++j;
    if (j < s.size() && s[j] == '.') {
      ++j;
      while (is_digit(j)) ++j;
    }
    out.push_back({true, std::string(s.substr(start, j - start))});
    i = lit_start = j;
  }
  flush_literal(lit_start, s.size());
  return out;
}

std::vector<Token> tokenize_number(std::string_view s, PlaceRange places) {
  size_t i = 0;
  bool neg = false;
  if (i < s.size() && (s[i] == '+' || s[i] == '-')) {
    neg = s[i] == '-';
    ++i;
  }
  size_t int_start = i;
  while (i < s.size() && s[i] >= '0' && s[i] <= '9') ++i;
  size_t int_len = i - int_start;
  if (int_len == 0) throw MalformedNumber("no integer digits in: " + std::string(s));
  size_t frac_start = 0, frac_len = 0;
  bool has_dot = false;
  if (i < s.size() && s[i] == '.') {
    has_dot = true;
    frac_start = ++i;
    while (i < s.size() && s[i] >= '0' && s[i] <= '9') ++i;
    frac_len = i - frac_start;
  }
  if (i != s.size()) throw MalformedNumber("trailing characters in: " + std::string(s));

  std::vector<Token> out;
  if (neg) out.push_back(Token::negative());
  for (size_t d = 0; d < int_len; ++d) {
    int p = static_cast<int>(int_len - 1 - d);
    if (!places.contains(p)) throw PlaceOutOfRange("place " + std::to_string(p) + " outside grid");
    out.push_back(Token::numeric(s[int_start + d] - '0', p));
  }
  if (has_dot) out.push_back(Token::dot());
  for (size_t d = 0; d < frac_len; ++d) {
    int p = -static_cast<int>(d + 1);
    if (!places.contains(p)) throw PlaceOutOfRange("place " + std::to_string(p) + " outside grid");
    out.push_back(Token::numeric(s[frac_start + d] - '0', p));
  }
  return out;
}

Decimal detokenize_number(std::span<const Token> run) {
  if (run.empty()) throw MalformedNumeral("empty numeral");
  size_t i = 0;
  bool neg = false;
  if (run[0].kind == TokenKind::Negative) {
    neg = true;
    i = 1;
    if (i == run.size()) throw MalformedNumeral("sign with no digits");
  }
  if (run[i].kind != TokenKind::Numeric || run[i].place < 0)
    throw MalformedNumeral("numeral must start with an integer-place digit");
  int expect = run[i].place;
  long long value = 0;
  int scale = 0;
  bool seen_dot = false;
  for (; i < run.size(); ++i) {
    const Token& t = run[i];
    if (t.kind == TokenKind::Dot) {
      if (seen_dot) throw MalformedNumeral("duplicate dot");
      if (expect != -1) throw MalformedNumeral("dot in the wrong place");
      if (i + 1 == run.size()) throw MalformedNumeral("dot with no fraction digits");
      seen_dot = true;
      continue;
    }
    if (t.kind == TokenKind::Negative) throw MalformedNumeral("sign inside numeral");
    if (t.kind != TokenKind::Numeric) throw MalformedNumeral("non-numeric token inside numeral");
    if (t.place != expect) throw MalformedNumeral("place gap: expected " + std::to_string(expect) +
                                                  " got " + std::to_string(int(t.place)));
    if (t.place < 0 && !seen_dot) throw MalformedNumeral("fraction digits without dot");
    value = value * 10 + t.digit;
    if (t.place < 0) scale = -t.place;
    expect = t.place - 1;
  }
  if (expect >= 0) throw MalformedNumeral("numeral stops before place 0");
  return Decimal{neg ? -value : value, scale};
}

std::vector<Token> render_property_value(const PropertySchema& schema, double value) {
  long long sc = std::llround(std::abs(value) * static_cast<double>(pow10ll(schema.frac_digits)));
  bool neg = value < 0 && sc != 0;
  if (neg && !schema.sign_allowed)
    throw ValueOutOfRange(schema.name + " cannot be negative: " + std::to_string(value));
  if (sc >= pow10ll(schema.int_digits + schema.frac_digits))
    throw ValueOutOfRange(schema.name + " does not fit " + std::to_string(schema.int_digits) +
                          " integer digits: " + std::to_string(value));
  std::string digits = std::to_string(sc);
  int width = schema.int_digits + schema.frac_digits;
  if (static_cast<int>(digits.size()) < width)
    digits.insert(digits.begin(), width - digits.size(), '0');
  std::vector<Token> out;
  if (neg) out.push_back(Token::negative());
  for (int d = 0; d < schema.int_digits; ++d)
    out.push_back(Token::numeric(digits[d] - '0', schema.int_digits - 1 - d));
  if (schema.frac_digits > 0) {
    out.push_back(Token::dot());
    for (int d = 0; d < schema.frac_digits; ++d)
      out.push_back(Token::numeric(digits[schema.int_digits + d] - '0', -(d + 1)));
  }
  return out;
}

TokenizedSequence encode_sequence(const std::map<std::string, double>& props,
                                  const std::vector<std::string>& text,
                                  const Vocabulary& vocab) {
  for (const auto& [name, _] : props)
    if (!vocab.has_property(name)) throw UnknownProperty("unknown property: " + name);
  TokenizedSequence seq;
  for (const auto& schema : vocab.schema().properties) {
    auto it = props.find(schema.name);
    if (it == props.end()) continue;
    seq.prop.push_back(Token::tag(schema.name));
    for (auto& t : render_property_value(schema, it->second)) seq.prop.push_back(std::move(t));
    seq.prop.push_back(Token::separator());
  }
  for (const auto& s : text) seq.text.push_back(Token::text_sym(s));
  return seq;
}

TokenizedSequence encode_masked_query(const std::vector<std::string>& names,
                                      const std::vector<std::string>& text,
                                      const Vocabulary& vocab) {
  TokenizedSequence seq;
  for (const auto& name : names) {
    const PropertySchema& schema = vocab.property(name);
    seq.prop.push_back(Token::tag(schema.name));
    for (int i = 0; i < schema.width(); ++i) seq.prop.push_back(Token::mask());
    seq.prop.push_back(Token::separator());
  }
  for (const auto& s : text) seq.text.push_back(Token::text_sym(s));
  return seq;
}

TokenizedSequence mask_numerals(const TokenizedSequence& seq) {
  TokenizedSequence out = seq;
  for (int p : out.numeral_positions()) out.prop[p] = Token::mask();
  return out;
}

TokenizedSequence sequence_from_ids(const std::vector<int>& ids, const Vocabulary& vocab) {
  TokenizedSequence seq;
  size_t i = 0;
  while (i < ids.size() && vocab.token(ids[i]).kind == TokenKind::PropertyTag) {
    seq.prop.push_back(vocab.token(ids[i++]));
    while (i < ids.size()) {
      const Token& t = vocab.token(ids[i]);
      seq.prop.push_back(t);
      ++i;
      if (t.kind == TokenKind::Separator) break;
    }
  }
  for (; i < ids.size(); ++i) seq.text.push_back(vocab.token(ids[i]));
  return seq;
}

RawLine parse_raw_line(std::string_view line, bool split_ws) {
  RawLine out;
  size_t i = 0;
  while (i < line.size() && line[i] == '<') {
    size_t close = line.find('>', i + 1);
    if (close == std::string_view::npos) throw MalformedNumber("unterminated property tag");
    std::string name(line.substr(i + 1, close - i - 1));
    if (name.empty()) throw MalformedNumber("empty property name");
    size_t bar = line.find('|', close + 1);
    if (bar == std::string_view::npos)
      throw MalformedNumber("property block <" + name + "> missing '|' terminator");
    std::string num(line.substr(close + 1, bar - close - 1));
    if (num.empty()) throw MalformedNumber("property <" + name + "> has no value");
    out.props.emplace_back(std::move(name), std::move(num));
    i = bar + 1;
  }
  std::string_view text = line.substr(i);
  if (split_ws) {
    size_t j = 0;
    while (j < text.size()) {
      while (j < text.size() && std::isspace(static_cast<unsigned char>(text[j]))) ++j;
      size_t k = j;
      while (k < text.size() && !std::isspace(static_cast<unsigned char>(text[k]))) ++k;
      if (k > j) out.text.emplace_back(text.substr(j, k - j));
      j = k;
    }
  } else {
    for (char c : text) {
      if (std::isspace(static_cast<unsigned char>(c)))
        throw MalformedNumber("whitespace in character-split text");
      out.text.emplace_back(1, c);
    }
  }
  return out;
}

std::vector<Token> line_tokens(const RawLine& line, PlaceRange places) {
  std::vector<Token> out;
  for (const auto& [name, num] : line.props) {
    out.push_back(Token::tag(name));
    for (Token& t : tokenize_number(num, places)) out.push_back(std::move(t));
    out.push_back(Token::separator());
  }
  for (const auto& s : line.text) out.push_back(Token::text_sym(s));
  return out;
}

std::string render_line(const DecodedSequence& seq, bool split_ws) {
  std::string out;
  for (const auto& [name, dec] : seq.props) {
    out += '<';
    out += name;
    out += '>';
    out += dec.str();
    out += '|';
  }
  for (size_t i = 0; i < seq.text.size(); ++i) {
    if (split_ws && i) out += ' ';
    out += seq.text[i];
  }
  return out;
}

DecodedSequence decode_sequence(const std::vector<int>& ids, const Vocabulary& vocab) {
  TokenizedSequence seq = sequence_from_ids(ids, vocab);
  DecodedSequence out;
  for (const auto& b : scan_property_blocks(seq)) {
    std::span<const Token> run(seq.prop.data() + b.first, b.last - b.first);
    for (const Token& t : run)
      if (t.kind == TokenKind::Mask) throw MalformedNumeral("masked numeral slot in " + b.name);
    out.props.emplace_back(b.name, detokenize_number(run));
  }
  for (const auto& t : seq.text) {
    if (t.kind != TokenKind::Text)
      throw MalformedNumeral("unexpected token in text part: " + t.render());
    out.text.push_back(t.text);
  }
  return out;
}

}  // namespace rt
