#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace seqforge {

  // Bijective id <-> token table. Reserved specials occupy the lowest ids;
  // user specials (language tags and similar) follow.
  class Vocabulary {
  public:
    static constexpr int32_t kPad = 0;
    static constexpr int32_t kUnk = 1;
    static constexpr int32_t kBos = 2;
    static constexpr int32_t kEos = 3;
    static constexpr int32_t kMask = 4;
    static const std::array<std::string, 5> kReserved;

    // Starts with the reserved specials.
    Vocabulary();

    // Returns the id of token, inserting it when absent.
    int32_t add(const std::string& token, bool special = false);

    std::optional<int32_t> find(const std::string& token) const;
    int32_t id_or_unk(const std::string& token) const;
    const std::string& token(int32_t id) const;
    bool contains(int32_t id) const { return id >= 0 && id < size(); }
    bool is_special(int32_t id) const;
    int32_t size() const { return static_cast<int32_t>(id_to_token_.size()); }

    const std::vector<std::string>& tokens() const { return id_to_token_; }
    std::vector<int32_t> special_ids() const;

    uint64_t checksum() const;

    bool operator==(const Vocabulary& other) const;

  private:
    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int32_t> token_to_id_;
    std::vector<bool> special_;
  };

  std::string lang_tag(const std::string& lang);

  // Byte-pair-encoding model. Words are whitespace-delimited; the last symbol
  // of every word carries the end-of-word marker, so merges never cross words.
  class SubwordModel {
  public:
    static constexpr std::string_view kMarker = "</w>";
    static constexpr std::string_view kHeader = "SEQFORGE-BPE v1";

    SubwordModel() = default;

    // Merges the most frequent adjacent pair until the vocabulary reaches
    // vocab_size or no pair remains. Ties go to the lexicographically
    // smallest (left, right) pair.
    static SubwordModel train(const std::vector<std::string>& lines,
                              int32_t vocab_size,
                              const std::vector<std::string>& specials);

    std::vector<int32_t> encode(std::string_view text) const;
    std::string decode(std::span<const int32_t> ids, bool strip_specials = false) const;

    // Subword symbols of a single word (no whitespace).
    std::vector<std::string> segment(std::string_view word) const;

    int32_t tag_id(const std::string& lang) const;

    const Vocabulary& vocab() const { return vocab_; }
    const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }

    std::string serialize() const;
    static SubwordModel parse(const std::string& text);
    void save(const std::string& path) const;
    static SubwordModel load(const std::string& path);

  private:
    void index_merges();

    Vocabulary vocab_;
    std::vector<std::pair<std::string, std::string>> merges_;
    std::map<std::pair<std::string, std::string>, int32_t> merge_rank_;
    std::vector<std::string> specials_by_length_;
  };

  // Splits UTF-8 into code points; malformed bytes become single-byte units.
  std::vector<std::string> utf8_chars(std::string_view text);
  std::vector<std::string> split_whitespace(std::string_view text);

  // Sequence convention: encoder input = subwords + </s> + tag;
  // decoder input = tag + subwords; decoder target = subwords + </s>.
  std::vector<int32_t> encoder_input(std::span<const int32_t> subwords, int32_t tag);
  std::vector<int32_t> decoder_input(std::span<const int32_t> subwords, int32_t tag);
  std::vector<int32_t> decoder_target(std::span<const int32_t> subwords);

}  // namespace seqforge
