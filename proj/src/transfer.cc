#include "seqforge/transfer.h"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <unordered_map>

namespace seqforge {

  namespace {

    std::string trim(const std::string& s) {
      const auto b = s.find_first_not_of(" \t\r");
      if (b == std::string::npos)
        return "";
      const auto e = s.find_last_not_of(" \t\r");
      return s.substr(b, e - b + 1);
    }

    bool match_from(const std::string& p, size_t pi, const std::string& t, size_t ti, std::vector<std::string>& caps) {
      if (pi == p.size())
        return ti == t.size();
      if (p[pi] == '*') {
        for (size_t len = 0; ti + len <= t.size(); ++len) {
          caps.push_back(t.substr(ti, len));
          if (match_from(p, pi + 1, t, ti + len, caps))
            return true;
          caps.pop_back();
        }
        return false;
      }
      return ti < t.size() && p[pi] == t[ti] && match_from(p, pi + 1, t, ti + 1, caps);
    }

    size_t count_stars(const std::string& s) { return static_cast<size_t>(std::count(s.begin(), s.end(), '*')); }

    std::string substitute(const std::string& pattern, const std::vector<std::string>& caps) {
      std::string out;
      size_t next = 0;
      for (char c : pattern) {
        if (c == '*')
          out += caps.at(next++);
        else
          out += c;
      }
      return out;
    }

    bool is_vocab_indexed(const std::string& name) {
      return name == "embed.tokens" || name == "output.weight" || name == "output.bias";
    }

    Tensor transpose_2d(const Tensor& t) {
      const int64_t r = t.dim(0), c = t.dim(1);
      std::vector<Real> out(r * c);
      const auto d = t.data();
      for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j)
          out[j * r + i] = d[i * c + j];
      return Tensor({c, r}, std::move(out));
    }

  }  // namespace

  std::optional<std::vector<std::string>> glob_match(const std::string& pattern, const std::string& text) {
    std::vector<std::string> caps;
    if (match_from(pattern, 0, text, 0, caps))
      return caps;
    return std::nullopt;
  }

  void TransferMap::add(std::string target, std::string source) {
    if (target.empty() || source.empty())
      throw TransferError("transfer rule needs both sides");
    if (source != "random" && source != "source" && count_stars(source) > count_stars(target))
      throw TransferError("rule " + target + "=" + source + " uses more wildcards on the source side");
    if (source == "source" && target != "*")
      throw TransferError("'source' is only valid in the default rule; write " + target + "=" + target);
    for (const auto& r : rules_)
      if (r.target == target)
        throw TransferError("duplicate transfer rule for " + target);
    rules_.push_back({std::move(target), std::move(source)});
  }

  TransferMap TransferMap::parse(const std::string& text) {
    TransferMap map;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (const auto hash = line.find('#'); hash != std::string::npos)
        line = line.substr(0, hash);
      line = trim(line);
      if (line.empty())
        continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos || line.find('=', eq + 1) != std::string::npos)
        throw TransferError("transfer map line " + std::to_string(lineno) + ": expected target=source");
      map.add(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return map;
  }

  TransferMap TransferMap::load(const std::string& path) {
    std::ifstream in(path);
    if (!in)
      throw TransferError("cannot read transfer map " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse(buf.str());
  }

  TransferMap TransferMap::identity() {
    TransferMap map;
    map.add("*", "source");
    return map;
  }

  std::optional<std::string> TransferMap::resolve(const std::string& target) const {
    const Rule* chosen = nullptr;
    std::vector<std::string> caps;
    for (const auto& r : rules_) {
      if (r.target == "*")
        continue;
      if (auto m = glob_match(r.target, target)) {
        if (chosen)
          throw TransferError(target + " is matched by both " + chosen->target + " and " + r.target);
        chosen = &r;
        caps = std::move(*m);
      }
    }
    if (!chosen) {
      for (const auto& r : rules_)
        if (r.target == "*") {
          chosen = &r;
          caps = {target};
        }
    }
    if (!chosen)
      throw TransferError("no transfer rule covers " + target);
    if (chosen->source == "random")
      return std::nullopt;
    if (chosen->source == "source")
      return target;
    return substitute(chosen->source, caps);
  }

  Tensor remap_rows(const std::vector<std::string>& old_tokens,
                    const std::vector<std::string>& new_tokens,
                    const Tensor& old_matrix,
                    uint64_t seed,
                    double stddev) {
    const bool vector = old_matrix.rank() == 1;
    if (old_matrix.dim(0) != static_cast<int64_t>(old_tokens.size()))
      throw TransferError("old matrix rows do not match the old vocabulary size");
    const int64_t cols = vector ? 1 : old_matrix.dim(1);
    std::unordered_map<std::string, int64_t> old_index;
    for (size_t i = 0; i < old_tokens.size(); ++i)
      old_index.emplace(old_tokens[i], static_cast<int64_t>(i));
    const auto src = old_matrix.data();
    std::vector<Real> out(new_tokens.size() * cols);
    for (size_t r = 0; r < new_tokens.size(); ++r) {
      Real* row = out.data() + r * cols;
      if (auto it = old_index.find(new_tokens[r]); it != old_index.end()) {
        std::copy(src.begin() + it->second * cols, src.begin() + (it->second + 1) * cols, row);
        continue;
      }
      Rng rng(splitmix64(seed ^ fnv1a64(new_tokens[r])));
      for (int64_t c = 0; c < cols; ++c)
        row[c] = static_cast<Real>(stddev * rng.normal());
    }
    Shape shape{static_cast<int64_t>(new_tokens.size())};
    if (!vector)
      shape.push_back(cols);
    return Tensor(shape, std::move(out), true);
  }

  TransformerModel apply_transfer(const TransformerModel& source,
                                  const ModelConfig& target_config,
                                  const TransferMap& map,
                                  const TransferOptions& opts) {
    const bool remap = !opts.source_tokens.empty() || !opts.target_tokens.empty();
    if (remap) {
      if (static_cast<int64_t>(opts.source_tokens.size()) != source.config().vocab_size)
        throw TransferError("source token list does not match the source vocabulary size");
      if (static_cast<int64_t>(opts.target_tokens.size()) != target_config.vocab_size)
        throw TransferError("target token list does not match the target vocabulary size");
    }

    Rng rng(opts.seed);
    TransformerModel target(target_config, rng);
    for (auto& [name, t] : target.params()) {
      const auto from = map.resolve(name);
      if (!from)
        continue;
      if (!source.params().contains(*from))
        throw TransferError("source model has no parameter " + *from + " (wanted by " + name + ")");
      const Tensor& s = source.params().get(*from);

      if (remap && is_vocab_indexed(name) && is_vocab_indexed(*from)) {
        Tensor value;
        if (name == "output.bias") {
          // Fresh output biases start at zero like the default init.
          value = remap_rows(opts.source_tokens, opts.target_tokens, s, opts.seed, 0.0);
        } else if (name == "output.weight") {
          value = transpose_2d(remap_rows(opts.source_tokens, opts.target_tokens, transpose_2d(s), opts.seed));
        } else {
          value = remap_rows(opts.source_tokens, opts.target_tokens, s, opts.seed);
        }
        if (value.shape() != t.shape())
          throw TransferError("shape mismatch for " + name + ": " + shape_str(value.shape()) + " vs " +
                              shape_str(t.shape()));
        std::copy(value.data().begin(), value.data().end(), t.data_mut().begin());
        continue;
      }

      if (name == "embed.positions" && s.rank() == 2 && s.dim(1) == t.dim(1)) {
        // Rows beyond the shorter table keep their fresh values.
        const int64_t rows = std::min(s.dim(0), t.dim(0));
        std::copy(s.data().begin(), s.data().begin() + rows * s.dim(1), t.data_mut().begin());
        continue;
      }

      if (s.shape() != t.shape())
        throw TransferError("shape mismatch for " + name + " <- " + *from + ": " + shape_str(s.shape()) + " vs " +
                            shape_str(t.shape()));
      std::copy(s.data().begin(), s.data().end(), t.data_mut().begin());
    }
    return target;
  }

}  // namespace seqforge
