#include "vattn/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "vattn/error.hpp"
#include "vattn/io_util.hpp"

namespace vattn {

namespace {

constexpr char kMagic[8] = {'V', 'A', 'T', 'T', 'N', 'C', 'K', 'P'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

class Writer {
 public:
  template <typename T>
  void Put(T value) {
    char buf[sizeof(T)];
    std::memcpy(buf, &value, sizeof(T));
    bytes_.append(buf, sizeof(T));
  }
  void PutBytes(const void* data, std::size_t n) {
    bytes_.append(static_cast<const char*>(data), n);
  }
  std::string& bytes() { return bytes_; }

 private:
  std::string bytes_;
};

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T Get() {
    T value;
    std::memcpy(&value, Take(sizeof(T)), sizeof(T));
    return value;
  }
  const char* Take(std::size_t n) {
    if (pos_ + n > bytes_.size()) {
      throw Error(ErrorKind::kSchema, "checkpoint truncated");
    }
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string SerializeCheckpoint(const ToyModel& model) {
  const auto& c = model.config();
  Writer w;
  w.PutBytes(kMagic, sizeof(kMagic));
  w.Put<std::uint32_t>(kCheckpointVersion);
  for (int v : {c.embed_dim, c.head_count, c.layer_count, c.mlp_dim,
                c.vocab_size, c.feature_dim, c.max_vision_tokens,
                c.max_sequence_length}) {
    w.Put<std::int32_t>(v);
  }
  w.Put<std::uint64_t>(c.seed);
  w.Put<std::uint64_t>(model.update_count());
  const auto& ts = model.params().tensors;
  w.Put<std::uint32_t>(static_cast<std::uint32_t>(ts.size()));
  for (const auto& t : ts) {
    w.Put<std::uint32_t>(static_cast<std::uint32_t>(t.name.size()));
    w.PutBytes(t.name.data(), t.name.size());
    w.Put<std::uint32_t>(static_cast<std::uint32_t>(t.value.rows()));
    w.Put<std::uint32_t>(static_cast<std::uint32_t>(t.value.cols()));
    w.PutBytes(t.value.data(), sizeof(double) * t.value.size());
  }
  w.Put<std::uint32_t>(Crc32(w.bytes()));
  return std::move(w.bytes());
}

ToyModel DeserializeCheckpoint(const std::string& bytes) {
  if (bytes.size() < sizeof(kMagic) + 8 ||
      std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw Error(ErrorKind::kSchema, "not a model checkpoint (bad magic)");
  }
  std::uint32_t version = 0;
  std::memcpy(&version, bytes.data() + sizeof(kMagic), 4);
  if (version != kCheckpointVersion) {
    throw Error(ErrorKind::kVersionMismatch,
                "checkpoint version " + std::to_string(version) +
                    " unsupported (expected " +
                    std::to_string(kCheckpointVersion) + ")");
  }
  const std::string_view body(bytes.data(), bytes.size() - 4);
  std::uint32_t stored = 0;
  std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
  if (Crc32(body) != stored) {
    throw Error(ErrorKind::kSchema, "checkpoint checksum mismatch");
  }
  Reader r(body);
  r.Take(sizeof(kMagic) + 4);
  ModelConfig c;
  c.embed_dim = r.Get<std::int32_t>();
  c.head_count = r.Get<std::int32_t>();
  c.layer_count = r.Get<std::int32_t>();
  c.mlp_dim = r.Get<std::int32_t>();
  c.vocab_size = r.Get<std::int32_t>();
  c.feature_dim = r.Get<std::int32_t>();
  c.max_vision_tokens = r.Get<std::int32_t>();
  c.max_sequence_length = r.Get<std::int32_t>();
  c.seed = r.Get<std::uint64_t>();
  const auto updates = r.Get<std::uint64_t>();
  c.Validate();

  ParameterSet params;
  const auto count = r.Get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    Tensor t;
    const auto len = r.Get<std::uint32_t>();
    t.name.assign(r.Take(len), len);
    const auto rows = r.Get<std::uint32_t>();
    const auto cols = r.Get<std::uint32_t>();
    t.value.resize(rows, cols);
    std::memcpy(t.value.data(),
                r.Take(sizeof(double) * static_cast<std::size_t>(rows) * cols),
                sizeof(double) * static_cast<std::size_t>(rows) * cols);
    params.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw Error(ErrorKind::kSchema, "trailing bytes in checkpoint");
  return ModelFromParts(c, std::move(params), updates);
}

void SaveCheckpoint(const ToyModel& model, const std::filesystem::path& path) {
  WriteFileAtomic(path, SerializeCheckpoint(model));
}

ToyModel LoadCheckpoint(const std::filesystem::path& path) {
  return DeserializeCheckpoint(ReadFile(path));
}

}  // namespace vattn
