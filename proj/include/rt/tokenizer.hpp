#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "rt/tokens.hpp"

namespace rt {

// exact decimal: value = scaled / 10^scale
struct Decimal {
  long long scaled = 0;
  int scale = 0;

  double value() const;
  std::string str() const;
  static Decimal from_value(double v, int scale);

  bool operator==(const Decimal&) const = default;
};

struct TextSegment {
  bool numeric = false;
  std::string s;
  bool operator==(const TextSegment&) const = default;
};

// split a line into literal and decimal-number segments; concatenation restores the input
std::vector<TextSegment> split_numerics(std::string_view s);

inline constexpr PlaceRange kWidestPlaces{-9, 9};

// decimal string -> digit/dot/negative tokens, most significant digit first
std::vector<Token> tokenize_number(std::string_view s, PlaceRange places = kWidestPlaces);

// inverse of tokenize_number; validates shape of the run
Decimal detokenize_number(std::span<const Token> run);

// property blocks (schema order) followed by text symbols
TokenizedSequence encode_sequence(const std::map<std::string, double>& props,
                                  const std::vector<std::string>& text,
                                  const Vocabulary& vocab);

// like encode_sequence but numeral slots are [MASK]; used to query properties
TokenizedSequence encode_masked_query(const std::vector<std::string>& names,
                                      const std::vector<std::string>& text,
                                      const Vocabulary& vocab);

// copy with every numeral slot replaced by [MASK]
TokenizedSequence mask_numerals(const TokenizedSequence& seq);

struct DecodedSequence {
  std::vector<std::pair<std::string, Decimal>> props;
  std::vector<std::string> text;
};

DecodedSequence decode_sequence(const std::vector<int>& ids, const Vocabulary& vocab);
TokenizedSequence sequence_from_ids(const std::vector<int>& ids, const Vocabulary& vocab);

// one raw corpus line: "<name>number|" property blocks followed by text symbols
struct RawLine {
  std::vector<std::pair<std::string, std::string>> props;
  std::vector<std::string> text;

  bool operator==(const RawLine&) const = default;
};

// parse "<qed>0.297|CCO"; blocks are read greedily while the remainder starts
// with '<'.  split_ws switches the text part from single characters to
// whitespace-separated symbols.
RawLine parse_raw_line(std::string_view line, bool split_ws = false);

// tokens for a parsed line: tag + digits + separator per property, then text
std::vector<Token> line_tokens(const RawLine& line, PlaceRange places = kWidestPlaces);

// inverse rendering: "<name>value|" blocks then text, space-joined when split_ws.
// round-trips lines whose numbers are canonical (no leading/trailing zero padding).
std::string render_line(const DecodedSequence& seq, bool split_ws = false);

// fixed-width numeral tokens for one property value (no tag, no separator)
std::vector<Token> render_property_value(const PropertySchema& schema, double value);

}  // namespace rt
