#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <unordered_map>
#include <vector>

#include "rt/errors.hpp"

namespace rt {

enum class TokenKind : uint8_t {
  Numeric,      // digit v at decimal place p, rendered "v_p"
  Text,         // ordinary sequence symbol
  PropertyTag,  // "<name>"
  Separator,    // "|"
  Dot,          // "."
  Negative,     // "-"
  Mask,         // "[MASK]"
  Pad,          // "[PAD]"
  End           // "[END]"
};

struct Token {
  TokenKind kind = TokenKind::Pad;
  int8_t digit = 0;   // Numeric only, 0..9
  int16_t place = 0;  // Numeric only
  std::string text;   // Text symbol or PropertyTag name

  static Token numeric(int v, int p);
  static Token text_sym(std::string s);
  static Token tag(std::string name);
  static Token separator() { return Token{TokenKind::Separator, 0, 0, {}}; }
  static Token dot() { return Token{TokenKind::Dot, 0, 0, {}}; }
  static Token negative() { return Token{TokenKind::Negative, 0, 0, {}}; }
  static Token mask() { return Token{TokenKind::Mask, 0, 0, {}}; }
  static Token pad() { return Token{TokenKind::Pad, 0, 0, {}}; }
  static Token end() { return Token{TokenKind::End, 0, 0, {}}; }

  std::string render() const;
  static Token parse(const std::string& s);

  bool operator==(const Token&) const = default;
};

// inclusive decimal-place grid covered by the numeric vocabulary
struct PlaceRange {
  int p_min = 0;
  int p_max = 0;
  bool contains(int p) const { return p >= p_min && p <= p_max; }
};

// fixed-width rendering recipe for one property value
struct PropertySchema {
  std::string name;
  int int_digits = 1;
  int frac_digits = 3;
  bool sign_allowed = false;
  // numeral tokens for a non-negative value: digits, plus the dot when frac_digits > 0
  int width() const { return int_digits + (frac_digits > 0 ? 1 + frac_digits : 0); }
};

struct VocabularySchema {
  std::vector<PropertySchema> properties;
  PlaceRange places;
};

class Vocabulary {
 public:
  Vocabulary() = default;

  // id layout: [PAD] [MASK] [END] | . -  tags...  numeric grid (p_max..p_min x 0..9)  text...
  static Vocabulary build(VocabularySchema schema, const std::vector<std::string>& text_symbols);

  int size() const { return static_cast<int>(tokens_.size()); }
  const Token& token(int id) const;
  int id(const Token& t) const;
  bool contains(const Token& t) const;

  const VocabularySchema& schema() const { return schema_; }
  const PropertySchema& property(const std::string& name) const;
  bool has_property(const std::string& name) const;

  int pad_id() const { return 0; }
  int mask_id() const { return 1; }
  int end_id() const { return 2; }
  int separator_id() const { return 3; }
  int dot_id() const { return 4; }
  int negative_id() const { return 5; }
  int numeric_id(int v, int p) const;
  const std::vector<int>& text_ids() const { return text_ids_; }

  void save(std::ostream& os) const;
  std::string save_string() const;
  static Vocabulary load(std::istream& is);
  static Vocabulary load_string(const std::string& s);
  void save_file(const std::string& path) const;
  static Vocabulary load_file(const std::string& path);

  uint64_t hash() const;

 private:
  void index_tokens();

  VocabularySchema schema_;
  std::vector<Token> tokens_;
  std::unordered_map<std::string, int> id_by_render_;
  std::vector<int> text_ids_;
  int numeric_base_ = 0;  // id of the (v=0, p=p_max) token
};

// property blocks first, then text; T = k + l
struct TokenizedSequence {
  std::vector<Token> prop;
  std::vector<Token> text;

  int k() const { return static_cast<int>(prop.size()); }
  int l() const { return static_cast<int>(text.size()); }
  int T() const { return k() + l(); }
  const Token& at(int i) const { return i < k() ? prop[i] : text[i - k()]; }
  Token& at(int i) { return i < k() ? prop[i] : text[i - k()]; }

  std::vector<int> ids(const Vocabulary& v) const;
  // positions of numeral slots (everything between a tag and its separator)
  std::vector<int> numeral_positions() const;

  bool operator==(const TokenizedSequence&) const = default;
};

// structural view of one property block inside the prop part
struct PropertyBlock {
  std::string name;
  int tag_pos = 0;
  int first = 0;  // first numeral slot
  int last = 0;   // one past the last numeral slot; separator sits at `last`
};

std::vector<PropertyBlock> scan_property_blocks(const TokenizedSequence& seq);

}  // namespace rt
