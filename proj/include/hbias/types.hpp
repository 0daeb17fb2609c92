#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

namespace hbias {

enum class TextFormat : std::uint8_t {
  kStory,
  kCharacterDescription,
  kBiography,
  kIntroduction,
  kSocialMediaProfile,
  kSynopsis,
  kNarrative,
  kSelfIntroduction,
  kTragicStory,
  kFunnyStory,
  kRomanticStory,
  kHorrorStory,
  kDramaticStory,
};

enum class Race : std::uint8_t { kAfrican, kAsian, kHispanic, kWhite };

enum class Gender : std::uint8_t { kMan, kWoman };

inline constexpr std::array<TextFormat, 13> kAllFormats = {
    TextFormat::kStory,           TextFormat::kCharacterDescription,
    TextFormat::kBiography,       TextFormat::kIntroduction,
    TextFormat::kSocialMediaProfile, TextFormat::kSynopsis,
    TextFormat::kNarrative,       TextFormat::kSelfIntroduction,
    TextFormat::kTragicStory,     TextFormat::kFunnyStory,
    TextFormat::kRomanticStory,   TextFormat::kHorrorStory,
    TextFormat::kDramaticStory,
};

inline constexpr std::array<Race, 4> kAllRaces = {Race::kAfrican, Race::kAsian,
                                                  Race::kHispanic, Race::kWhite};

inline constexpr std::array<Gender, 2> kAllGenders = {Gender::kMan, Gender::kWoman};

// "character description"
std::string_view to_string(TextFormat f);
// "African"
std::string_view to_string(Race r);
// "man" / "woman"
std::string_view to_string(Gender g);

// Words that follow the format noun in the prompt ("story about").
std::string_view prompt_phrase(TextFormat f);
// Identifier-safe form ("character-description").
std::string_view slug(TextFormat f);

// Parsing accepts display names and slugs, case-insensitively.
std::optional<TextFormat> parse_format(std::string_view s);
std::optional<Race> parse_race(std::string_view s);
std::optional<Gender> parse_gender(std::string_view s);

}  // namespace hbias
