#pragma once

#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "seqforge/model.h"
#include "seqforge/tokenizer.h"

namespace seqforge {

  class CheckpointError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
  };

  // Binary container: "YNMT", u32 version, u32 tensor count, then per tensor
  // u16 name length, name, u8 rank, u64 dims, little-endian f32 payload,
  // followed by a u64-length-prefixed UTF-8 JSON metadata block.
  struct Checkpoint {
    static constexpr uint32_t kVersion = 1;

    std::vector<std::pair<std::string, Tensor>> tensors;
    nlohmann::json meta = nlohmann::json::object();

    const Tensor* find(const std::string& name) const;

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);
    std::string to_bytes() const;
    static Checkpoint from_bytes(const std::string& bytes);
  };

  // Model parameters plus "config" (and "tokenizer", "vocab_checksum" when a
  // tokenizer is given) in the metadata.
  Checkpoint model_checkpoint(const TransformerModel& model, const SubwordModel* tokenizer = nullptr);

  struct LoadedModel {
    TransformerModel model;
    std::optional<SubwordModel> tokenizer;
    nlohmann::json meta;
  };

  LoadedModel model_from_checkpoint(const Checkpoint& ckpt);
  LoadedModel load_model(const std::string& path);

  // Overwrites every parameter of the model from same-named tensors.
  void load_parameters(TransformerModel& model, const Checkpoint& ckpt);

}  // namespace seqforge
