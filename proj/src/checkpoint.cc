#include "seqforge/checkpoint.h"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace seqforge {

  namespace {

    static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

    constexpr char kMagic[4] = {'Y', 'N', 'M', 'T'};

    template <typename T>
    void put(std::string& out, T value) {
      char bytes[sizeof(T)];
      std::memcpy(bytes, &value, sizeof(T));
      out.append(bytes, sizeof(T));
    }

    class Reader {
    public:
      explicit Reader(const std::string& bytes) : bytes_(bytes) {}

      template <typename T>
      T get() {
        T value;
        std::memcpy(&value, take(sizeof(T)), sizeof(T));
        return value;
      }

      const char* take(size_t n) {
        if (n > bytes_.size() - pos_)
          throw CheckpointError("truncated checkpoint");
        const char* p = bytes_.data() + pos_;
        pos_ += n;
        return p;
      }

      bool done() const { return pos_ == bytes_.size(); }

    private:
      const std::string& bytes_;
      size_t pos_ = 0;
    };

  }  // namespace

  const Tensor* Checkpoint::find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name)
        return &t;
    return nullptr;
  }

  std::string Checkpoint::to_bytes() const {
    std::string out(kMagic, 4);
    put<uint32_t>(out, kVersion);
    put<uint32_t>(out, static_cast<uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
      if (name.size() > 0xffff)
        throw CheckpointError("tensor name too long: " + name);
      put<uint16_t>(out, static_cast<uint16_t>(name.size()));
      out += name;
      put<uint8_t>(out, static_cast<uint8_t>(t.rank()));
      for (int64_t d : t.shape())
        put<uint64_t>(out, static_cast<uint64_t>(d));
      for (Real v : t.data())
        put<float>(out, static_cast<float>(v));
    }
    const std::string text = meta.dump();
    put<uint64_t>(out, text.size());
    out += text;
    return out;
  }

  Checkpoint Checkpoint::from_bytes(const std::string& bytes) {
    Reader in(bytes);
    if (std::memcmp(in.take(4), kMagic, 4) != 0)
      throw CheckpointError("not a checkpoint (bad magic)");
    const auto version = in.get<uint32_t>();
    if (version != kVersion)
      throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
    Checkpoint ckpt;
    const auto count = in.get<uint32_t>();
    for (uint32_t i = 0; i < count; ++i) {
      const auto len = in.get<uint16_t>();
      std::string name(in.take(len), len);
      const auto rank = in.get<uint8_t>();
      Shape shape;
      for (int r = 0; r < rank; ++r)
        shape.push_back(static_cast<int64_t>(in.get<uint64_t>()));
      const int64_t n = numel(shape);
      std::vector<Real> values(n);
      for (int64_t j = 0; j < n; ++j)
        values[j] = static_cast<Real>(in.get<float>());
      ckpt.tensors.emplace_back(std::move(name), Tensor(shape, std::move(values)));
    }
    const auto meta_len = in.get<uint64_t>();
    const char* text = in.take(meta_len);
    if (!in.done())
      throw CheckpointError("trailing bytes after checkpoint metadata");
    try {
      ckpt.meta = nlohmann::json::parse(text, text + meta_len);
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError(std::string("bad checkpoint metadata: ") + e.what());
    }
    return ckpt;
  }

  void Checkpoint::save(const std::string& path) const {
    // Write-then-rename so a crash never leaves a half-written checkpoint.
    const std::string tmp = path + ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
      if (!out)
        throw CheckpointError("cannot write " + tmp);
      const std::string bytes = to_bytes();
      out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
      if (!out)
        throw CheckpointError("write failed: " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
      throw CheckpointError("cannot move checkpoint into place: " + path);
  }

  Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
      throw CheckpointError("cannot read " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return from_bytes(buf.str());
  }

  Checkpoint model_checkpoint(const TransformerModel& model, const SubwordModel* tokenizer) {
    Checkpoint ckpt;
    for (const auto& [name, t] : model.params())
      ckpt.tensors.emplace_back(name, t.detach());
    ckpt.meta["config"] = nlohmann::json::parse(model.config().to_json());
    if (tokenizer) {
      ckpt.meta["tokenizer"] = tokenizer->serialize();
      ckpt.meta["vocab_checksum"] = std::to_string(tokenizer->vocab().checksum());
    }
    return ckpt;
  }

  void load_parameters(TransformerModel& model, const Checkpoint& ckpt) {
    for (auto& [name, t] : model.params()) {
      const Tensor* src = ckpt.find(name);
      if (!src)
        throw CheckpointError("checkpoint lacks parameter " + name);
      if (src->shape() != t.shape())
        throw CheckpointError("shape mismatch for " + name + ": " + shape_str(src->shape()) + " vs " +
                              shape_str(t.shape()));
      std::copy(src->data().begin(), src->data().end(), t.data_mut().begin());
    }
  }

  LoadedModel model_from_checkpoint(const Checkpoint& ckpt) {
    if (!ckpt.meta.contains("config"))
      throw CheckpointError("checkpoint has no model config");
    LoadedModel out;
    Rng rng(0);
    out.model = TransformerModel(ModelConfig::from_json(ckpt.meta.at("config").dump()), rng);
    load_parameters(out.model, ckpt);
    if (ckpt.meta.contains("tokenizer")) {
      out.tokenizer = SubwordModel::parse(ckpt.meta.at("tokenizer").get<std::string>());
      if (ckpt.meta.contains("vocab_checksum") &&
          ckpt.meta.at("vocab_checksum").get<std::string>() != std::to_string(out.tokenizer->vocab().checksum()))
        throw CheckpointError("tokenizer does not match the stored vocabulary checksum");
    }
    out.meta = ckpt.meta;
    return out;
  }

  LoadedModel load_model(const std::string& path) { return model_from_checkpoint(Checkpoint::load(path)); }

}  // namespace seqforge
