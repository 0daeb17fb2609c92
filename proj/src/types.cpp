#include "hbias/types.hpp"

#include "hbias/util.hpp"

namespace hbias {
namespace {

struct FormatInfo {
  TextFormat format;
  std::string_view name;
  std::string_view phrase;
  std::string_view slug;
};

constexpr std::array<FormatInfo, 13> kFormatTable = {{
    {TextFormat::kStory, "story", "story about", "story"},
    {TextFormat::kCharacterDescription, "character description", "character description of",
     "character-description"},
    {TextFormat::kBiography, "biography", "biography of", "biography"},
    {TextFormat::kIntroduction, "introduction", "introduction of", "introduction"},
    {TextFormat::kSocialMediaProfile, "social media profile", "social media profile of",
     "social-media-profile"},
    {TextFormat::kSynopsis, "synopsis", "synopsis for", "synopsis"},
    {TextFormat::kNarrative, "narrative", "narrative of", "narrative"},
    {TextFormat::kSelfIntroduction, "self-introduction", "self-introduction of",
     "self-introduction"},
    {TextFormat::kTragicStory, "tragic story", "tragic story about", "tragic-story"},
    {TextFormat::kFunnyStory, "funny story", "funny story about", "funny-story"},
    {TextFormat::kRomanticStory, "romantic story", "romantic story about", "romantic-story"},
    {TextFormat::kHorrorStory, "horror story", "horror story about", "horror-story"},
    {TextFormat::kDramaticStory, "dramatic story", "dramatic story about", "dramatic-story"},
}};

const FormatInfo& info(TextFormat f) { return kFormatTable[static_cast<std::size_t>(f)]; }

}  // namespace

std::string_view to_string(TextFormat f) { return info(f).name; }
std::string_view prompt_phrase(TextFormat f) { return info(f).phrase; }
std::string_view slug(TextFormat f) { return info(f).slug; }

std::string_view to_string(Race r) {
  switch (r) {
    case Race::kAfrican: return "African";
    case Race::kAsian: return "Asian";
    case Race::kHispanic: return "Hispanic";
    case Race::kWhite: return "White";
  }
  return "?";
}

std::string_view to_string(Gender g) { return g == Gender::kMan ? "man" : "woman"; }

std::optional<TextFormat> parse_format(std::string_view s) {
  const std::string t = trim(s);
  for (const auto& fi : kFormatTable) {
    if (iequals(t, fi.name) || iequals(t, fi.slug)) return fi.format;
  }
  return std::nullopt;
}

std::optional<Race> parse_race(std::string_view s) {
  const std::string t = trim(s);
  for (Race r : kAllRaces) {
    if (iequals(t, to_string(r))) return r;
  }
  return std::nullopt;
}

std::optional<Gender> parse_gender(std::string_view s) {
  const std::string t = to_lower_ascii(trim(s));
  if (t == "man" || t == "men" || t == "male") return Gender::kMan;
  if (t == "woman" || t == "women" || t == "female") return Gender::kWoman;
  return std::nullopt;
}

}  // namespace hbias
