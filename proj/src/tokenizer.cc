#include "seqforge/tokenizer.h"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "seqforge/rng.h"

namespace seqforge {

  const std::array<std::string, 5> Vocabulary::kReserved = {"<pad>", "<unk>", "<s>", "</s>", "<mask>"};

  Vocabulary::Vocabulary() {
    for (const auto& token : kReserved)
      add(token, true);
  }

  int32_t Vocabulary::add(const std::string& token, bool special) {
    if (auto it = token_to_id_.find(token); it != token_to_id_.end())
      return it->second;
    const int32_t id = size();
    id_to_token_.push_back(token);
    special_.push_back(special);
    token_to_id_.emplace(token, id);
    return id;
  }

  std::optional<int32_t> Vocabulary::find(const std::string& token) const {
    if (auto it = token_to_id_.find(token); it != token_to_id_.end())
      return it->second;
    return std::nullopt;
  }

  int32_t Vocabulary::id_or_unk(const std::string& token) const {
    return find(token).value_or(kUnk);
  }

  const std::string& Vocabulary::token(int32_t id) const {
    if (!contains(id))
      throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of size " +
                              std::to_string(size()));
    return id_to_token_[id];
  }

  bool Vocabulary::is_special(int32_t id) const {
    return contains(id) && special_[id];
  }

  std::vector<int32_t> Vocabulary::special_ids() const {
    std::vector<int32_t> ids;
    for (int32_t i = 0; i < size(); ++i)
      if (special_[i])
        ids.push_back(i);
    return ids;
  }

  uint64_t Vocabulary::checksum() const {
    std::string joined;
    for (int32_t i = 0; i < size(); ++i) {
      joined += id_to_token_[i];
      joined += special_[i] ? "\tS\n" : "\n";
    }
    return fnv1a64(joined);
  }

  bool Vocabulary::operator==(const Vocabulary& other) const {
    return id_to_token_ == other.id_to_token_ && special_ == other.special_;
  }

  std::string lang_tag(const std::string& lang) {
    return "<2" + lang + ">";
  }

  std::vector<std::string> utf8_chars(std::string_view text) {
    std::vector<std::string> chars;
    size_t i = 0;
    while (i < text.size()) {
      const unsigned char lead = static_cast<unsigned char>(text[i]);
      size_t len = 1;
      if (lead >= 0xF0)
        len = 4;
      else if (lead >= 0xE0)
        len = 3;
      else if (lead >= 0xC0)
        len = 2;
      if (i + len > text.size())
        len = 1;
      for (size_t j = 1; j < len; ++j)
        if ((static_cast<unsigned char>(text[i + j]) & 0xC0) != 0x80)
          len = 1;
      chars.emplace_back(text.substr(i, len));
      i += len;
    }
    return chars;
  }

  std::vector<std::string> split_whitespace(std::string_view text) {
    std::vector<std::string> words;
    std::string current;
    for (char c : text) {
      if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v') {
        if (!current.empty())
          words.push_back(std::move(current));
        current.clear();
      } else {
        current.push_back(c);
      }
    }
    if (!current.empty())
      words.push_back(std::move(current));
    return words;
  }

  namespace {

    std::vector<std::string> initial_symbols(std::string_view word) {
      auto symbols = utf8_chars(word);
      if (!symbols.empty())
        symbols.back() += SubwordModel::kMarker;
      return symbols;
    }

    void apply_merge(std::vector<std::string>& symbols,
                     const std::string& left,
                     const std::string& right) {
      std::vector<std::string> merged;
      merged.reserve(symbols.size());
      for (size_t i = 0; i < symbols.size(); ++i) {
        if (i + 1 < symbols.size() && symbols[i] == left && symbols[i + 1] == right) {
          merged.push_back(left + right);
          ++i;
        } else {
          merged.push_back(std::move(symbols[i]));
        }
      }
      symbols = std::move(merged);
    }

    // Splits text into chunks that are either an exact special token or plain text.
    std::vector<std::pair<std::string, bool>> split_specials(std::string_view text,
                                                             const std::vector<std::string>& specials) {
      std::vector<std::pair<std::string, bool>> chunks;
      std::string plain;
      size_t i = 0;
      while (i < text.size()) {
        bool matched = false;
        if (text[i] == '<') {
          for (const auto& special : specials) {
            if (text.compare(i, special.size(), special) == 0) {
              if (!plain.empty())
                chunks.emplace_back(std::move(plain), false);
              plain.clear();
              chunks.emplace_back(special, true);
              i += special.size();
              matched = true;
              break;
            }
          }
        }
        if (!matched)
          plain.push_back(text[i++]);
      }
      if (!plain.empty())
        chunks.emplace_back(std::move(plain), false);
      return chunks;
    }

  }  // namespace

  SubwordModel SubwordModel::train(const std::vector<std::string>& lines,
                                   int32_t vocab_size,
                                   const std::vector<std::string>& specials) {
    SubwordModel model;
    for (const auto& special : specials) {
      const auto parts = split_whitespace(special);
      if (parts.size() != 1 || parts[0] != special)
        throw std::invalid_argument("special token must be a non-empty string without whitespace: '" +
                                    special + "'");
      model.vocab_.add(special, true);
    }
    model.index_merges();

    std::map<std::string, int64_t> word_counts;
    for (const auto& line : lines) {
      for (const auto& [chunk, is_special] : split_specials(line, model.specials_by_length_)) {
        if (is_special)
          continue;
        for (auto& word : split_whitespace(chunk))
          ++word_counts[word];
      }
    }
    if (word_counts.empty())
      throw std::invalid_argument("train_bpe: empty corpus");

    std::vector<std::vector<std::string>> words;
    std::vector<int64_t> counts;
    std::set<std::string> base;
    for (const auto& [word, count] : word_counts) {
      words.push_back(initial_symbols(word));
      counts.push_back(count);
      base.insert(words.back().begin(), words.back().end());
    }
    if (vocab_size <= model.vocab_.size() + static_cast<int32_t>(base.size()))
      throw std::invalid_argument("train_bpe: vocab_size " + std::to_string(vocab_size) +
                                  " must exceed specials (" + std::to_string(model.vocab_.size()) +
                                  ") plus base symbols (" + std::to_string(base.size()) + ")");
    for (const auto& symbol : base)
      model.vocab_.add(symbol);

    while (model.vocab_.size() < vocab_size) {
      std::map<std::pair<std::string, std::string>, int64_t> pair_counts;
      for (size_t w = 0; w < words.size(); ++w)
        for (size_t i = 0; i + 1 < words[w].size(); ++i)
          pair_counts[{words[w][i], words[w][i + 1]}] += counts[w];
      if (pair_counts.empty())
        break;
      // Ordered map: the first maximum is the lexicographically smallest.
      auto best = pair_counts.begin();
      for (auto it = pair_counts.begin(); it != pair_counts.end(); ++it)
        if (it->second > best->second)
          best = it;
      const auto [left, right] = best->first;
      model.merges_.emplace_back(left, right);
      model.vocab_.add(left + right);
      for (auto& word : words)
        apply_merge(word, left, right);
    }
    model.index_merges();
    return model;
  }

  void SubwordModel::index_merges() {
    merge_rank_.clear();
    for (size_t i = 0; i < merges_.size(); ++i)
      merge_rank_.emplace(merges_[i], static_cast<int32_t>(i));
    specials_by_length_.clear();
    for (int32_t id : vocab_.special_ids())
      specials_by_length_.push_back(vocab_.token(id));
    std::stable_sort(specials_by_length_.begin(), specials_by_length_.end(),
                     [](const std::string& a, const std::string& b) { return a.size() > b.size(); });
  }

  std::vector<std::string> SubwordModel::segment(std::string_view word) const {
    auto symbols = initial_symbols(word);
    while (symbols.size() > 1) {
      int32_t best_rank = -1;
      size_t best_at = 0;
      for (size_t i = 0; i + 1 < symbols.size(); ++i) {
        auto it = merge_rank_.find({symbols[i], symbols[i + 1]});
        if (it != merge_rank_.end() && (best_rank < 0 || it->second < best_rank)) {
          best_rank = it->second;
          best_at = i;
        }
      }
      if (best_rank < 0)
        break;
      const std::string left = symbols[best_at];
      const std::string right = symbols[best_at + 1];
      apply_merge(symbols, left, right);
    }
    return symbols;
  }

  std::vector<int32_t> SubwordModel::encode(std::string_view text) const {
    std::vector<int32_t> ids;
    for (const auto& [chunk, is_special] : split_specials(text, specials_by_length_)) {
      if (is_special) {
        ids.push_back(*vocab_.find(chunk));
        continue;
      }
      for (const auto& word : split_whitespace(chunk))
        for (const auto& symbol : segment(word))
          ids.push_back(vocab_.id_or_unk(symbol));
    }
    return ids;
  }

  std::string SubwordModel::decode(std::span<const int32_t> ids, bool strip_specials) const {
    std::string raw;
    for (int32_t id : ids) {
      const std::string& token = vocab_.token(id);
      if (vocab_.is_special(id)) {
        if (!strip_specials) {
          raw += ' ';
          raw += token;
          raw += ' ';
        }
        continue;
      }
      if (token.size() >= kMarker.size() &&
          token.compare(token.size() - kMarker.size(), kMarker.size(), kMarker) == 0) {
        raw.append(token, 0, token.size() - kMarker.size());
        raw += ' ';
      } else {
        raw += token;
      }
    }
    std::string normalized;
    for (const auto& word : split_whitespace(raw)) {
      if (!normalized.empty())
        normalized += ' ';
      normalized += word;
    }
    return normalized;
  }

  int32_t SubwordModel::tag_id(const std::string& lang) const {
    const auto id = vocab_.find(lang_tag(lang));
    if (!id || !vocab_.is_special(*id))
      throw std::invalid_argument("no language tag " + lang_tag(lang) + " in vocabulary");
    return *id;
  }

  std::string SubwordModel::serialize() const {
    std::ostringstream out;
    out << kHeader << '\n';
    for (const auto& [left, right] : merges_)
      out << left << ' ' << right << '\n';
    out << "#VOCAB\n";
    for (int32_t id = 0; id < vocab_.size(); ++id) {
      out << vocab_.token(id) << '\t' << id;
      if (vocab_.is_special(id))
        out << "\tS";
      out << '\n';
    }
    return out.str();
  }

  SubwordModel SubwordModel::parse(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != kHeader)
      throw std::runtime_error("not a SEQFORGE-BPE v1 model");
    SubwordModel model;
    bool in_vocab = false;
    std::vector<std::pair<std::string, bool>> entries;
    while (std::getline(in, line)) {
      if (line.empty())
        continue;
      if (!in_vocab) {
        if (line == "#VOCAB") {
          in_vocab = true;
          continue;
        }
        const auto space = line.find(' ');
        if (space == std::string::npos || line.find(' ', space + 1) != std::string::npos)
          throw std::runtime_error("malformed merge line: " + line);
        model.merges_.emplace_back(line.substr(0, space), line.substr(space + 1));
      } else {
        std::istringstream fields(line);
        std::string token, id_text, flag;
        if (!std::getline(fields, token, '\t') || !std::getline(fields, id_text, '\t'))
          throw std::runtime_error("malformed vocab line: " + line);
        std::getline(fields, flag, '\t');
        if (std::stol(id_text) != static_cast<long>(entries.size()))
          throw std::runtime_error("vocab ids must be dense and ordered: " + line);
        entries.emplace_back(token, flag == "S");
      }
    }
    if (entries.size() < Vocabulary::kReserved.size())
      throw std::runtime_error("vocabulary is missing reserved specials");
    for (size_t i = 0; i < Vocabulary::kReserved.size(); ++i)
      if (entries[i].first != Vocabulary::kReserved[i] || !entries[i].second)
        throw std::runtime_error("reserved special mismatch at id " + std::to_string(i));
    for (size_t i = Vocabulary::kReserved.size(); i < entries.size(); ++i)
      model.vocab_.add(entries[i].first, entries[i].second);
    if (model.vocab_.size() != static_cast<int32_t>(entries.size()))
      throw std::runtime_error("duplicate tokens in vocabulary");
    for (const auto& [left, right] : model.merges_)
      if (!model.vocab_.find(left + right))
        throw std::runtime_error("merge output missing from vocabulary: " + left + right);
    model.index_merges();
    return model;
  }

  void SubwordModel::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out)
      throw std::runtime_error("cannot write " + path);
    out << serialize();
  }

  SubwordModel SubwordModel::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
      throw std::runtime_error("cannot read " + path);
    std::ostringstream text;
    text << in.rdbuf();
    return parse(text.str());
  }

  std::vector<int32_t> encoder_input(std::span<const int32_t> subwords, int32_t tag) {
    std::vector<int32_t> ids(subwords.begin(), subwords.end());
    ids.push_back(Vocabulary::kEos);
    ids.push_back(tag);
    return ids;
  }

  std::vector<int32_t> decoder_input(std::span<const int32_t> subwords, int32_t tag) {
    std::vector<int32_t> ids{tag};
    ids.insert(ids.end(), subwords.begin(), subwords.end());
    return ids;
  }

  std::vector<int32_t> decoder_target(std::span<const int32_t> subwords) {
    std::vector<int32_t> ids(subwords.begin(), subwords.end());
    ids.push_back(Vocabulary::kEos);
    return ids;
  }

}  // namespace seqforge
