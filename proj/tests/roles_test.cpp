#include <gtest/gtest.h>

#include "cotlab/random.hpp"
#include "cotlab/roles.hpp"

namespace cotlab {
namespace {

const Vocab& V = Vocab::standard();

TEST(Vocab, RoundTrips) {
  EXPECT_EQ(V.decode(V.encode("3*4=")), "3*4=");
  EXPECT_TRUE(V.encode("").empty());
  for (TokenId id = 0; id < V.size(); ++id) {
    const Tokens one = V.encode(V.symbol(id));
    ASSERT_EQ(one.size(), 1u);
    EXPECT_EQ(one[0], id);
    EXPECT_EQ(V.decode(one), V.symbol(id));
  }
  EXPECT_LE(V.size(), 64u);
}

TEST(Vocab, UnknownSymbolThrows) {
  EXPECT_THROW(V.encode("3x4"), UnknownSymbol);
  EXPECT_THROW(V.encode("<nope>"), UnknownSymbol);
  EXPECT_THROW(V.id("?"), UnknownSymbol);
}

TEST(Vocab, JsonCompatibility) {
  EXPECT_NO_THROW(Vocab::check_compatible(V.to_json()));
  nlohmann::json bad = V.to_json();
  bad["#"] = 99;
  EXPECT_THROW(Vocab::check_compatible(bad), std::invalid_argument);
}

TEST(Segment, BasicSpans) {
  const Tokens t = V.encode("<bos>12<think>34</think><answer>5</answer>");
  const RoleSpans s = segment(t);
  EXPECT_EQ(s.prompt, (Span{1, 3}));
  EXPECT_EQ(s.cot, (Span{4, 6}));
  EXPECT_EQ(s.answer, (Span{8, 9}));
}

TEST(Segment, EmptyCotAccepted) {
  const RoleSpans s = segment(V.encode("<bos>12<think></think><answer>7<eos>"));
  EXPECT_TRUE(s.cot.empty());
  EXPECT_EQ(s.answer, (Span{6, 7}));
}

TEST(Segment, AnswerEndsAtEosOrEnd) {
  EXPECT_EQ(segment(V.encode("<bos>1<think>2</think><answer>34<eos><pad><pad>")).answer, (Span{6, 8}));
  EXPECT_EQ(segment(V.encode("<bos>1<think>2</think><answer>34")).answer, (Span{6, 8}));
}

TEST(Segment, MalformedTraces) {
  for (const char* bad : {
           "<bos>12<think>34</think>5",             // no <answer>
           "<bos>12</think><answer>5",              // no <think>
           "<bos>12<think>3<think>4</think><answer>5",  // duplicate
           "<bos>12<think>34<answer></think>5",     // out of order
           "<bos>1<think>2</think>3<answer>4",      // gap between delimiters
           "<bos>1<think>2<pad></think><answer>4",  // structural token inside a span
           "<bos>1<think>2</think><answer>4<eos>5",  // content after EOS
       }) {
    EXPECT_THROW(segment(V.encode(bad)), MalformedTrace) << bad;
  }
}

TEST(RoleMask, Examples) {
  const Tokens t = V.encode("<bos>12<think>34</think><answer>5</answer>");
  const RoleSpans s = segment(t);
  const auto cot = role_mask(s, t.size(), Role::Cot);
  for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(cot[i], i == 4 || i == 5);

  RoleSpans empty_answer = s;
  empty_answer.answer = {8, 8};
  for (bool b : role_mask(empty_answer, t.size(), Role::Answer)) EXPECT_FALSE(b);
}

TEST(RoleMask, PartitionOnRandomTraces) {
  Rng rng(17);
  for (int trial = 0; trial < 500; ++trial) {
    Tokens t{tok::kBos};
    auto content = [&](std::size_t n) {
      for (std::size_t i = 0; i < n; ++i) t.push_back(tok::kHint + rng.below(17));
    };
    content(rng.below(6));
    t.push_back(tok::kThinkOpen);
    content(rng.below(6));
    t.push_back(tok::kThinkClose);
    t.push_back(tok::kAnswerOpen);
    content(rng.below(4));
    if (rng.below(2)) t.push_back(tok::kAnswerClose);
    if (rng.below(2)) {
      t.push_back(tok::kEos);
      for (std::size_t i = rng.below(3); i > 0; --i) t.push_back(tok::kPad);
    }
    const RoleSpans s = segment(t);
    const auto labels = role_labels(s, t.size());
    std::size_t covered = 0;
    for (Role r : {Role::Prompt, Role::Cot, Role::Answer, Role::Delim}) {
      const auto m = role_mask(s, t.size(), r);
      for (std::size_t i = 0; i < t.size(); ++i) {
        EXPECT_EQ(m[i], labels[i] == r);
        covered += m[i];
      }
    }
    EXPECT_EQ(covered, t.size());
    EXPECT_LE(s.prompt.end, s.cot.begin);
    EXPECT_LE(s.cot.end, s.answer.begin);
    for (std::size_t i = 0; i < t.size(); ++i)
      if (tok::is_structural(t[i])) EXPECT_EQ(labels[i], Role::Delim);
  }
}

TEST(AnswerRows, TargetsAndQueries) {
  const RoleSpans s = segment(V.encode("<bos>12<think>34</think><answer>56</answer>"));
  EXPECT_EQ(answer_target_rows(s), (Span{7, 9}));
  EXPECT_EQ(answer_query_rows(s), (Span{7, 10}));
  RoleSpans e = s;
  e.answer = {8, 8};
  EXPECT_TRUE(answer_target_rows(e).empty());
}

}  // namespace
}  // namespace cotlab
