#pragma once

// Toy tokenizer and prompt / chain-of-thought / answer segmentation.

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace cotlab {

using TokenId = std::size_t;
using Tokens = std::vector<TokenId>;

struct UnknownSymbol : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Missing, duplicated or out-of-order trace delimiters.
struct MalformedTrace : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace tok {
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kThinkOpen = 3;
inline constexpr TokenId kThinkClose = 4;
inline constexpr TokenId kAnswerOpen = 5;
inline constexpr TokenId kAnswerClose = 6;
inline constexpr TokenId kHint = 7;
inline constexpr TokenId kDigit0 = 8;  // '0'..'9' are 8..17
inline constexpr TokenId kPlus = 18;
inline constexpr TokenId kMinus = 19;
inline constexpr TokenId kTimes = 20;
inline constexpr TokenId kDivide = 21;
inline constexpr TokenId kEquals = 22;
inline constexpr TokenId kSpace = 23;

constexpr bool is_digit(TokenId t) { return t >= kDigit0 && t < kDigit0 + 10; }
constexpr TokenId digit(int d) { return kDigit0 + static_cast<TokenId>(d); }
/// BOS, PAD, EOS and the four trace delimiters.
constexpr bool is_structural(TokenId t) { return t <= kAnswerClose; }
}  // namespace tok

/// Fixed symbol table. Structural tokens render as tags ("<think>"), the hint
/// marker as '#', everything else as its single character.
class Vocab {
 public:
  Vocab();

  static const Vocab& standard();

  std::size_t size() const { return symbols_.size(); }
  const std::string& symbol(TokenId id) const;
  TokenId id(std::string_view symbol) const;

  Tokens encode(std::string_view text) const;
  std::string decode(const Tokens& ids) const;

  nlohmann::json to_json() const;
  /// Throws std::invalid_argument unless `j` describes this exact table.
  static void check_compatible(const nlohmann::json& j);

 private:
  std::vector<std::string> symbols_;
};

/// Half-open index range.
struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  bool empty() const { return end <= begin; }
  bool contains(std::size_t i) const { return i >= begin && i < end; }
  bool operator==(const Span&) const = default;
};

struct RoleSpans {
  Span prompt;
  Span cot;
  Span answer;

  bool operator==(const RoleSpans&) const = default;
};

enum class Role : std::uint8_t { Prompt, Cot, Answer, Delim };

/// Splits BOS p.. <think> c.. </think> <answer> a.. </answer> <eos> into roles.
/// Requires exactly one of each of <think>, </think>, <answer>, in that order,
/// with </think> immediately followed by <answer>. The answer ends at the first
/// of </answer>, <eos> or the end of the sequence. Structural tokens inside a
/// content span are rejected; PAD is allowed only after EOS.
RoleSpans segment(const Tokens& tokens);

/// Best-effort spans for rollouts that failed segment(): the prompt runs to
/// the first <think>, the CoT to the next structural token, and the answer is
/// recovered only if </think><answer> follows. Throws MalformedTrace only
/// when <think> is missing.
RoleSpans segment_lenient(const Tokens& tokens);

/// Role label of every position; positions outside the three spans are Delim.
std::vector<Role> role_labels(const RoleSpans& spans, std::size_t length);

std::vector<bool> role_mask(const RoleSpans& spans, std::size_t length, Role role);

/// Positions whose next-token logits are scored against answer tokens:
/// [answer.begin - 1, answer.end - 1). Empty when the answer is empty.
Span answer_target_rows(const RoleSpans& spans);

/// Attention query rows that belong to the answer side of an A->* edge: the
/// answer positions plus the delimiter row that emits the first answer token.
Span answer_query_rows(const RoleSpans& spans);

}  // namespace cotlab
