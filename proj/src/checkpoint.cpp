#include "carid/checkpoint.hpp"

#include <zlib.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include <fcntl.h>
#include <unistd.h>

namespace carid {

namespace {

constexpr char kMagic[8] = {'C', 'A', 'R', 'I', 'D', 'C', 'K', 'P'};

template <typename T>
void put(std::string& out, T value) {
  unsigned char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>(value >> (8 * i));
  out.append(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T get(const std::string& in, std::size_t& pos, const std::filesystem::path& path) {
  if (in.size() - pos < sizeof(T)) throw Error(Errc::corrupt_checkpoint, path.string() + ": truncated");
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    value |= static_cast<T>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  }
  pos += sizeof(T);
  return value;
}

std::uint32_t crc(const char* data, std::size_t size) {
  uLong c = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large buffers in chunks.
  while (size > 0) {
    const auto n = static_cast<uInt>(std::min<std::size_t>(size, 1u << 30));
    c = crc32(c, reinterpret_cast<const Bytef*>(data), n);
    data += n;
    size -= n;
  }
  return static_cast<std::uint32_t>(c);
}

std::string hex(std::uint32_t v) {
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", v);
  return buf;
}

void write_atomic(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  if (fd < 0) throw Error(Errc::io_error, "cannot write " + tmp.string());
  std::size_t done = 0;
  while (done < bytes.size()) {
    const auto n = ::write(fd, bytes.data() + done, bytes.size() - done);
    if (n <= 0) {
      ::close(fd);
      throw Error(Errc::io_error, "write failed for " + tmp.string());
    }
    done += static_cast<std::size_t>(n);
  }
  ::fsync(fd);
  ::close(fd);
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(Errc::io_error, "rename to " + path.string() + ": " + ec.message());
}

}  // namespace

AugmentationPolicy CheckpointMeta::eval_policy() const {
  AugmentationPolicy policy;
  policy.output_height = output_height;
  policy.output_width = output_width;
  policy.normalization = normalization;
  return policy;
}

nlohmann::json to_json(const CheckpointMeta& m) {
  return {
      {"backbone",
       {{"name", m.spec.name},
        {"pretrained", m.spec.pretrained},
        {"unfreeze_last_block", m.spec.unfreeze_last_block},
        {"feature_dim", m.spec.feature_dim},
        {"input_height", m.spec.input_height},
        {"input_width", m.spec.input_width}}},
      {"num_classes", m.num_classes},
      {"dropout_rate", m.dropout_rate},
      {"class_names", m.class_names},
      {"normalization", {{"mean", m.normalization.mean}, {"std", m.normalization.std}}},
      {"output_size", {m.output_height, m.output_width}},
      {"config_yaml", m.config_yaml},
      {"metrics", m.metrics},
      {"epoch", m.epoch},
  };
}

CheckpointMeta meta_from_json(const nlohmann::json& j) {
  CheckpointMeta m;
  const auto& b = j.at("backbone");
  m.spec.name = b.at("name").get<std::string>();
  m.spec.pretrained = b.at("pretrained").get<bool>();
  m.spec.unfreeze_last_block = b.at("unfreeze_last_block").get<bool>();
  m.spec.feature_dim = b.at("feature_dim").get<int>();
  m.spec.input_height = b.at("input_height").get<int>();
  m.spec.input_width = b.at("input_width").get<int>();
  m.num_classes = j.at("num_classes").get<int>();
  m.dropout_rate = j.at("dropout_rate").get<double>();
  m.class_names = j.at("class_names").get<std::vector<std::string>>();
  m.normalization.mean = j.at("normalization").at("mean").get<std::array<float, 3>>();
  m.normalization.std = j.at("normalization").at("std").get<std::array<float, 3>>();
  m.output_height = j.at("output_size").at(0).get<int>();
  m.output_width = j.at("output_size").at(1).get<int>();
  m.config_yaml = j.at("config_yaml").get<std::string>();
  m.metrics = j.at("metrics");
  m.epoch = j.at("epoch").get<int>();
  return m;
}

CheckpointMeta make_meta(const Model& model, const std::vector<std::string>& class_names,
                         const AugmentationPolicy& policy) {
  CheckpointMeta m;
  m.spec = model->spec();
  m.num_classes = model->num_classes();
  m.dropout_rate = model->dropout_rate();
  m.class_names = class_names;
  m.normalization = policy.normalization;
  m.output_height = policy.output_height;
  m.output_width = policy.output_width;
  return m;
}

void save_checkpoint(const Model& model, const CheckpointMeta& meta, const std::filesystem::path& path) {
  if (static_cast<int>(meta.class_names.size()) != model->num_classes()) {
    throw Error(Errc::invalid_argument, "class_names size does not match num_classes");
  }
  std::ostringstream weights;
  torch::serialize::OutputArchive archive;
  model->save(archive);
  archive.save_to(weights);
  const std::string weight_bytes = weights.str();
  const std::string meta_bytes = to_json(meta).dump();

  std::string out(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, meta_bytes.size());
  out += meta_bytes;
  put<std::uint64_t>(out, weight_bytes.size());
  out += weight_bytes;
  put<std::uint32_t>(out, crc(out.data(), out.size()));
  write_atomic(path, out);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io_error, "cannot read checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw Error(Errc::corrupt_checkpoint, path.string() + ": bad magic");
  }
  std::size_t pos = sizeof kMagic;
  const auto version = get<std::uint32_t>(bytes, pos, path);
  if (version > kCheckpointVersion) {
    throw Error(Errc::version_mismatch, path.string() + ": format version " + std::to_string(version) +
                                            " is newer than " + std::to_string(kCheckpointVersion));
  }
  if (version == 0) throw Error(Errc::corrupt_checkpoint, path.string() + ": version 0");
  const auto meta_len = get<std::uint64_t>(bytes, pos, path);
  if (bytes.size() - pos < meta_len) throw Error(Errc::corrupt_checkpoint, path.string() + ": truncated");
  const std::string meta_bytes = bytes.substr(pos, meta_len);
  pos += meta_len;
  const auto weights_len = get<std::uint64_t>(bytes, pos, path);
  if (bytes.size() - pos < weights_len) throw Error(Errc::corrupt_checkpoint, path.string() + ": truncated");
  const std::size_t weights_at = pos;
  pos += weights_len;
  const std::size_t body = pos;
  const auto stored = get<std::uint32_t>(bytes, pos, path);
  if (pos != bytes.size()) throw Error(Errc::corrupt_checkpoint, path.string() + ": trailing bytes");
  if (stored != crc(bytes.data(), body)) throw Error(Errc::corrupt_checkpoint, path.string() + ": checksum mismatch");

  Checkpoint ckp;
  try {
    ckp.meta = meta_from_json(nlohmann::json::parse(meta_bytes));
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::corrupt_checkpoint, path.string() + ": metadata: " + e.what());
  }
  auto spec = ckp.meta.spec;
  spec.pretrained = false;
  ckp.model = Model(spec, ckp.meta.num_classes, ckp.meta.dropout_rate);
  try {
    torch::serialize::InputArchive archive;
    archive.load_from(bytes.data() + weights_at, weights_len);
    ckp.model->load(archive);
  } catch (const c10::Error& e) {
    throw Error(Errc::corrupt_checkpoint, path.string() + ": weights: " + e.what_without_backtrace());
  }
  ckp.model->eval();
  ckp.model_version = spec.name + "-" + hex(crc(bytes.data() + weights_at, weights_len));
  return ckp;
}

}  // namespace carid
