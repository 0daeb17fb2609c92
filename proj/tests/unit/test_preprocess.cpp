#include <gtest/gtest.h>

#include <random>

#include "hbias/embedding_store.hpp"
#include "hbias/error.hpp"

namespace hbias::embedding {
namespace {

PreprocessOptions everything() {
  PreprocessOptions o;
  o.lowercase = true;
  o.strip_non_alphanumeric = true;
  o.collapse_whitespace = true;
  o.remove_group_terms = true;
  o.group_term_list = default_group_terms();
  return o;
}

TEST(Preprocess, AllRulesTogether) {
  EXPECT_EQ(preprocess_text("An African American man smiled!", everything()), "an smiled");
}

TEST(Preprocess, NoOptionsIsIdentity) {
  const std::string s = "  An African American man, smiled!  ";
  EXPECT_EQ(preprocess_text(s, {}), s);
  EXPECT_FALSE(PreprocessOptions{}.any());
}

TEST(Preprocess, CollapseWhitespaceTrims) {
  PreprocessOptions o;
  o.collapse_whitespace = true;
  EXPECT_EQ(preprocess_text("  a   b  ", o), "a b");
  EXPECT_EQ(preprocess_text("a\t\n b", o), "a b");
}

TEST(Preprocess, GroupTermsMatchWholeWordsOnly) {
  PreprocessOptions o;
  o.remove_group_terms = true;
  o.collapse_whitespace = true;
  o.group_term_list = default_group_terms();
  EXPECT_EQ(preprocess_text("The manager met a Woman", o), "The manager met a");
  EXPECT_EQ(preprocess_text("Whitestone is a town", o), "Whitestone is a town");
}

TEST(Preprocess, LowercaseAndStripIndividually) {
  PreprocessOptions lower;
  lower.lowercase = true;
  EXPECT_EQ(preprocess_text("Hello World", lower), "hello world");
  PreprocessOptions strip;
  strip.strip_non_alphanumeric = true;
  EXPECT_EQ(preprocess_text("it's 9:30, ok?", strip), "its 930 ok");
}

TEST(Preprocess, RemovalWithoutTermsIsInvalid) {
  PreprocessOptions o;
  o.remove_group_terms = true;
  EXPECT_THROW(o.validate(), ValidationError);
}

TEST(Preprocess, IsIdempotentOnRandomText) {
  const std::vector<std::string> words = {"An", "african", "AMERICAN", "man", "woman's", "smiled!", "  ", "\t",
                                          "manager", "White-collar", "Asian", "42", "café", ",", "--", "men"};
  std::mt19937 rng(11);
  for (int trial = 0; trial < 300; ++trial) {
    std::string s;
    const int len = static_cast<int>(rng() % 12);
    for (int k = 0; k < len; ++k) {
      s += words[rng() % words.size()];
      if (rng() % 2) s += ' ';
    }
    PreprocessOptions o = everything();
    o.lowercase = rng() % 2;
    o.strip_non_alphanumeric = rng() % 2;
    o.collapse_whitespace = rng() % 2;
    o.remove_group_terms = rng() % 2;
    const auto once = preprocess_text(s, o);
    EXPECT_EQ(preprocess_text(once, o), once) << "input: '" << s << "'";
  }
}

}  // namespace
}  // namespace hbias::embedding
