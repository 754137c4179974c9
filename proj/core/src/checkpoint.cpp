#include "khn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "khn/errors.hpp"

namespace khn {
namespace {

constexpr char kMagic[8] = {'K', 'H', 'N', 'C', 'K', 'P', 'T', '\0'};

template <typename U>
void put(std::string& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double value) { put(out, std::bit_cast<std::uint64_t>(value)); }

void put_shape(std::string& out, const Shape& shape) {
  put(out, static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) put(out, static_cast<std::uint64_t>(d));
}

class ByteReader {
 public:
  explicit ByteReader(const std::string& bytes) : bytes_(bytes) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      value |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(U);
    return value;
  }

  std::string get_bytes(std::uint64_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  Shape get_shape() {
    auto rank = get<std::uint32_t>();
    if (rank > 8) throw CheckpointError("checkpoint: implausible tensor rank " + std::to_string(rank));
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(get<std::uint64_t>());
    return shape;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::uint64_t n) const {
    if (n > remaining()) throw CheckpointError("checkpoint is truncated");
  }

  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const RunConfig& config, const Shape& input_shape, const Model& model) {
  RunConfig embedded = config;
  embedded.output_dir.clear();
  const auto config_text = serialize(embedded);
  const auto params = model.all_params();

  std::string out(kMagic, sizeof(kMagic));
  put(out, kCheckpointVersion);
  put(out, static_cast<std::uint64_t>(config_text.size()));
  out += config_text;
  put_shape(out, input_shape);
  put(out, static_cast<std::uint32_t>(params.size()));
  std::uint64_t offset = 0;
  for (const auto& p : params) {
    put(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    put_shape(out, p.tensor.shape());
    put(out, offset);
    offset += p.tensor.numel() * sizeof(double);
  }
  put(out, offset);
  for (const auto& p : params) {
    for (double v : p.tensor.data()) put_f64(out, v);
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  ByteReader in(bytes);
  if (in.remaining() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("not a checkpoint file (bad magic)");
  }
  in.get_bytes(sizeof(kMagic));
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw IncompatibleCheckpointError("checkpoint format version " + std::to_string(version) +
                                      " is incompatible with this build (expects " +
                                      std::to_string(kCheckpointVersion) + ")");
  }
  const auto config_len = in.get<std::uint64_t>();
  Checkpoint ck;
  try {
    ck.config = parse_run_config(in.get_bytes(config_len));
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint holds an invalid config: ") + e.what());
  }
  ck.input_shape = in.get_shape();

  Model model;
  try {
    model = init_model(model_config(ck.config, ck.input_shape), 0);
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint config does not describe a model: ") + e.what());
  }
  auto params = model.all_params();
  const auto count = in.get<std::uint32_t>();
  if (count != params.size()) {
    throw CheckpointError("checkpoint manifest lists " + std::to_string(count) + " tensors, config implies " +
                          std::to_string(params.size()));
  }
  std::uint64_t expected_offset = 0;
  for (auto& p : params) {
    const auto name = in.get_bytes(in.get<std::uint32_t>());
    const auto shape = in.get_shape();
    const auto offset = in.get<std::uint64_t>();
    if (name != p.name || shape != p.tensor.shape()) {
      throw CheckpointError("checkpoint manifest entry " + name + " " + shape_str(shape) + " does not match " +
                            p.name + " " + shape_str(p.tensor.shape()));
    }
    if (offset != expected_offset) throw CheckpointError("checkpoint manifest offset of " + name + " is inconsistent");
    expected_offset += p.tensor.numel() * sizeof(double);
  }
  const auto payload_len = in.get<std::uint64_t>();
  if (payload_len != expected_offset) throw CheckpointError("checkpoint payload size disagrees with its manifest");
  if (in.remaining() < payload_len) throw CheckpointError("checkpoint is truncated");
  if (in.remaining() > payload_len) throw CheckpointError("checkpoint has trailing bytes");
  for (auto& p : params) {
    for (auto& v : p.tensor.mutable_data()) v = std::bit_cast<double>(in.get<std::uint64_t>());
  }
  ck.model = std::move(model);
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const RunConfig& config, const Shape& input_shape,
                     const Model& model) {
  const auto bytes = encode_checkpoint(config, input_shape, model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.close();
  if (!out) throw DataError("cannot write checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return decode_checkpoint(buffer.str());
}

}  // namespace khn
