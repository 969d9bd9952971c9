#include "cotlab/roles.hpp"

#include <algorithm>

namespace cotlab {

Vocab::Vocab()
    : symbols_{"<pad>", "<bos>", "<eos>", "<think>", "</think>", "<answer>", "</answer>", "#",
               "0",     "1",     "2",     "3",       "4",        "5",        "6",         "7",
               "8",     "9",     "+",     "-",       "*",        "/",        "=",         " "} {}

const Vocab& Vocab::standard() {
  static const Vocab v;
  return v;
}

const std::string& Vocab::symbol(TokenId id) const {
  if (id >= symbols_.size()) throw UnknownSymbol("token id " + std::to_string(id) + " out of range");
  return symbols_[id];
}

TokenId Vocab::id(std::string_view symbol) const {
  const auto it = std::find(symbols_.begin(), symbols_.end(), symbol);
  if (it == symbols_.end()) throw UnknownSymbol("unknown symbol '" + std::string(symbol) + "'");
  return static_cast<TokenId>(it - symbols_.begin());
}

Tokens Vocab::encode(std::string_view text) const {
  Tokens out;
  std::size_t i = 0;
  while (i < text.size()) {
    if (text[i] == '<') {
      const std::size_t close = text.find('>', i);
      if (close == std::string_view::npos) throw UnknownSymbol("unterminated tag in input");
      out.push_back(id(text.substr(i, close - i + 1)));
      i = close + 1;
    } else {
      out.push_back(id(text.substr(i, 1)));
      ++i;
    }
  }
  return out;
}

std::string Vocab::decode(const Tokens& ids) const {
  std::string out;
  for (TokenId t : ids) out += symbol(t);
  return out;
}

nlohmann::json Vocab::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t i = 0; i < symbols_.size(); ++i) j[symbols_[i]] = i;
  return j;
}

void Vocab::check_compatible(const nlohmann::json& j) {
  const Vocab& v = standard();
  if (!j.is_object() || j.size() != v.size()) throw std::invalid_argument("vocab size mismatch");
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!j.contains(v.symbols_[i]) || j.at(v.symbols_[i]).get<std::size_t>() != i) {
      throw std::invalid_argument("vocab entry mismatch for '" + v.symbols_[i] + "'");
    }
  }
}

namespace {

std::size_t find_unique(const Tokens& t, TokenId what, const char* name) {
  const auto n = std::count(t.begin(), t.end(), what);
  if (n == 0) throw MalformedTrace(std::string("missing ") + name);
  if (n > 1) throw MalformedTrace(std::string("duplicate ") + name);
  return static_cast<std::size_t>(std::find(t.begin(), t.end(), what) - t.begin());
}

void require_content(const Tokens& t, Span s, const char* name) {
  for (std::size_t i = s.begin; i < s.end; ++i) {
    if (tok::is_structural(t[i])) {
      throw MalformedTrace(std::string("structural token inside ") + name + " span");
    }
  }
}

}  // namespace

RoleSpans segment(const Tokens& tokens) {
  const std::size_t open = find_unique(tokens, tok::kThinkOpen, "<think>");
  const std::size_t close = find_unique(tokens, tok::kThinkClose, "</think>");
  const std::size_t ans = find_unique(tokens, tok::kAnswerOpen, "<answer>");
  if (!(open < close && close < ans)) throw MalformedTrace("trace delimiters out of order");
  if (ans != close + 1) throw MalformedTrace("content between </think> and <answer>");

  const std::size_t prompt_begin = (!tokens.empty() && tokens[0] == tok::kBos) ? 1 : 0;
  std::size_t answer_end = tokens.size();
  for (std::size_t i = ans + 1; i < tokens.size(); ++i) {
    if (tokens[i] == tok::kAnswerClose || tokens[i] == tok::kEos) {
      answer_end = i;
      break;
    }
  }

  RoleSpans s{{prompt_begin, open}, {open + 1, close}, {ans + 1, answer_end}};
  require_content(tokens, s.prompt, "prompt");
  require_content(tokens, s.cot, "cot");
  require_content(tokens, s.answer, "answer");

  // Tail: optional </answer>, optional <eos>, then padding only.
  std::size_t i = answer_end;
  if (i < tokens.size() && tokens[i] == tok::kAnswerClose) ++i;
  if (i < tokens.size() && tokens[i] == tok::kEos) ++i;
  for (; i < tokens.size(); ++i) {
    if (tokens[i] != tok::kPad) throw MalformedTrace("unexpected token after answer");
  }
  return s;
}

RoleSpans segment_lenient(const Tokens& tokens) {
  try {
    return segment(tokens);
  } catch (const MalformedTrace&) {
  }
  const auto is_open = [](TokenId t) { return t == tok::kThinkOpen; };
  const auto it = std::find_if(tokens.begin(), tokens.end(), is_open);
  if (it == tokens.end()) throw MalformedTrace("missing <think>");
  const std::size_t open = static_cast<std::size_t>(it - tokens.begin());
  const std::size_t prompt_begin = tokens[0] == tok::kBos ? 1 : 0;

  auto next_structural = [&](std::size_t from) {
    while (from < tokens.size() && !tok::is_structural(tokens[from])) ++from;
    return from;
  };
  std::size_t prompt_end = std::min(next_structural(prompt_begin), open);
  const std::size_t cot_end = next_structural(open + 1);
  RoleSpans s{{prompt_begin, prompt_end}, {open + 1, cot_end}, {cot_end, cot_end}};
  if (cot_end + 1 < tokens.size() && tokens[cot_end] == tok::kThinkClose &&
      tokens[cot_end + 1] == tok::kAnswerOpen) {
    s.answer = {cot_end + 2, next_structural(cot_end + 2)};
  }
  return s;
}

std::vector<Role> role_labels(const RoleSpans& spans, std::size_t length) {
  std::vector<Role> out(length, Role::Delim);
  for (std::size_t i = 0; i < length; ++i) {
    if (spans.prompt.contains(i)) out[i] = Role::Prompt;
    else if (spans.cot.contains(i)) out[i] = Role::Cot;
    else if (spans.answer.contains(i)) out[i] = Role::Answer;
  }
  return out;
}

std::vector<bool> role_mask(const RoleSpans& spans, std::size_t length, Role role) {
  const auto labels = role_labels(spans, length);
  std::vector<bool> out(length);
  for (std::size_t i = 0; i < length; ++i) out[i] = labels[i] == role;
  return out;
}

Span answer_target_rows(const RoleSpans& spans) {
  if (spans.answer.empty() || spans.answer.begin == 0) return {};
  return {spans.answer.begin - 1, spans.answer.end - 1};
}

Span answer_query_rows(const RoleSpans& spans) {
  if (spans.answer.empty() || spans.answer.begin == 0) return {};
  return {spans.answer.begin - 1, spans.answer.end};
}

}  // namespace cotlab
