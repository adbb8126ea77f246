#pragma once

#include <optional>
#include <string>
#include <vector>

#include "seqforge/model.h"

namespace seqforge {

  class TransferError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
  };

  // Glob map from target parameter names to source parameter names or
  // "random". One rule per line, "target=source"; '#' starts a comment.
  // '*' matches any run of characters, and the text it matched replaces the
  // corresponding '*' on the source side. A bare "*" rule is the default;
  // every other rule is specific, and a name matched by two specific rules is
  // an error.
  class TransferMap {
  public:
    struct Rule {
      std::string target;
      std::string source;  // pattern, or "random"
    };

    static TransferMap parse(const std::string& text);
    static TransferMap load(const std::string& path);
    // "*=source": every target parameter from the same-named source one.
    static TransferMap identity();

    void add(std::string target, std::string source);
    const std::vector<Rule>& rules() const { return rules_; }

    // Source name for one target name; nullopt means fresh initialization.
    std::optional<std::string> resolve(const std::string& target) const;

  private:
    std::vector<Rule> rules_;
  };

  // Glob match with '*' only; returns the captured pieces on success.
  std::optional<std::vector<std::string>> glob_match(const std::string& pattern, const std::string& text);

  // New rows for new_tokens: rows of tokens present in old_tokens are copied
  // bitwise, the others are drawn N(0, stddev) from a generator seeded by
  // (seed, token) alone. old_matrix is [old_tokens.size(), cols].
  Tensor remap_rows(const std::vector<std::string>& old_tokens,
                    const std::vector<std::string>& new_tokens,
                    const Tensor& old_matrix,
                    uint64_t seed,
                    double stddev = 0.02);

  struct TransferOptions {
    uint64_t seed = 1;
    // Token lists of the source and target vocabularies; both empty means the
    // vocabularies are the same.
    std::vector<std::string> source_tokens;
    std::vector<std::string> target_tokens;
  };

  // Target model whose parameters are copied (by value) from the source per
  // the map; unmapped parameters keep the fresh initialization. Vocabulary-
  // indexed tensors go through remap_rows; learned positions are copied up to
  // the shorter table.
  TransformerModel apply_transfer(const TransformerModel& source,
                                  const ModelConfig& target_config,
                                  const TransferMap& map,
                                  const TransferOptions& opts = {});

}  // namespace seqforge
