#include "tokenar/checkpoint.hpp"

#include "tokenar/error.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <vector>

namespace tokenar {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

std::vector<float> config_to_meta(const ModelConfig& c) {
  return {static_cast<float>(c.d_model),          static_cast<float>(c.n_layers),
          static_cast<float>(c.n_heads),          static_cast<float>(c.vocab_size),
          static_cast<float>(c.image_tokens),     static_cast<float>(c.max_seq_len),
          static_cast<float>(c.instruct_tokens),  static_cast<float>(c.index_table_size),
          static_cast<float>(c.distill_dim),      c.use_index_embedding ? 1.0f : 0.0f,
          static_cast<float>(c.rope_base)};
}

ModelConfig meta_to_config(const std::vector<float>& m, const std::string& path) {
  if (m.size() != 11) throw IoError("checkpoint meta.config has unexpected length: " + path);
  ModelConfig c;
  c.d_model = static_cast<int>(m[0]);
  c.n_layers = static_cast<int>(m[1]);
  c.n_heads = static_cast<int>(m[2]);
  c.vocab_size = static_cast<int>(m[3]);
  c.image_tokens = static_cast<int>(m[4]);
  c.max_seq_len = static_cast<int>(m[5]);
  c.instruct_tokens = static_cast<int>(m[6]);
  c.index_table_size = static_cast<int>(m[7]);
  c.distill_dim = static_cast<int>(m[8]);
  c.use_index_embedding = m[9] != 0.0f;
  c.rope_base = m[10];
  c.float_width = 32;
  return c;
}

void put_u32(std::ostream& out, std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }

void put_tensor(std::ostream& out, const std::string& name, const std::vector<std::uint32_t>& dims, const float* data,
                std::size_t count) {
  put_u32(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_u32(out, static_cast<std::uint32_t>(dims.size()));
  for (auto d : dims) put_u32(out, d);
  out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * sizeof(float)));
}

struct Reader {
  std::ifstream in;
  std::string path;

  std::uint32_t u32() {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    if (!in) throw IoError("truncated checkpoint: " + path);
    return v;
  }
  void bytes(char* dst, std::size_t n) {
    in.read(dst, static_cast<std::streamsize>(n));
    if (!in) throw IoError("truncated checkpoint: " + path);
  }
};

struct RawTensor {
  std::vector<std::uint32_t> dims;
  std::vector<float> data;
};

}  // namespace

std::string describe(const ModelConfig& c) {
  std::ostringstream os;
  os << "{d_model=" << c.d_model << ", n_layers=" << c.n_layers << ", n_heads=" << c.n_heads
     << ", vocab_size=" << c.vocab_size << ", image_tokens=" << c.image_tokens << ", max_seq_len=" << c.max_seq_len
     << ", instruct_tokens=" << c.instruct_tokens << ", index_table_size=" << c.index_table_size
     << ", distill_dim=" << c.distill_dim << ", index_embedding=" << (c.use_index_embedding ? "on" : "off") << "}";
  return os.str();
}

void require_compatible(const ModelConfig& expected, const ModelConfig& found, const std::string& source) {
  const bool same = expected.d_model == found.d_model && expected.n_layers == found.n_layers &&
                    expected.n_heads == found.n_heads && expected.vocab_size == found.vocab_size &&
                    expected.image_tokens == found.image_tokens && expected.max_seq_len == found.max_seq_len &&
                    expected.instruct_tokens == found.instruct_tokens &&
                    expected.index_table_size == found.index_table_size && expected.distill_dim == found.distill_dim &&
                    expected.use_index_embedding == found.use_index_embedding &&
                    static_cast<float>(expected.rope_base) == static_cast<float>(found.rope_base);
  if (!same)
    throw VersionError("model configuration mismatch: config expects " + describe(expected) + " but " + source +
                       " holds " + describe(found));
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams<float>& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic, 4);
  put_u32(out, kCheckpointVersion);
  std::uint32_t count = 1;
  params.visit([&](const std::string&, const Mat<float>&) { ++count; });
  put_u32(out, count);
  const auto meta = config_to_meta(params.config);
  put_tensor(out, "meta.config", {static_cast<std::uint32_t>(meta.size())}, meta.data(), meta.size());
  params.visit([&](const std::string& name, const Mat<float>& t) {
    put_tensor(out, name, {static_cast<std::uint32_t>(t.rows()), static_cast<std::uint32_t>(t.cols())}, t.data(),
               static_cast<std::size_t>(t.size()));
  });
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

ModelParams<float> load_checkpoint(const std::filesystem::path& path) {
  Reader r{std::ifstream(path, std::ios::binary), path.string()};
  if (!r.in) throw IoError("cannot open checkpoint " + path.string());
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0) throw IoError("not a TKAR checkpoint: " + path.string());
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw VersionError("checkpoint " + path.string() + " has format version " + std::to_string(version) +
                       ", reader supports " + std::to_string(kCheckpointVersion));

  const std::uint32_t count = r.u32();
  std::map<std::string, RawTensor> tensors;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = r.u32();
    if (name_len > 4096) throw IoError("corrupt tensor name in checkpoint " + path.string());
    std::string name(name_len, '\0');
    r.bytes(name.data(), name_len);
    RawTensor t;
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw IoError("corrupt tensor rank in checkpoint " + path.string());
    std::size_t elems = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      t.dims.push_back(r.u32());
      elems *= t.dims.back();
    }
    if (elems > (std::size_t{1} << 30)) throw IoError("corrupt tensor size in checkpoint " + path.string());
    t.data.resize(elems);
    r.bytes(reinterpret_cast<char*>(t.data.data()), elems * sizeof(float));
    tensors.emplace(std::move(name), std::move(t));
  }

  const auto meta = tensors.find("meta.config");
  if (meta == tensors.end()) throw IoError("checkpoint lacks meta.config: " + path.string());
  ModelParams<float> params = ModelParams<float>::zeros(meta_to_config(meta->second.data, path.string()));
  params.visit([&](const std::string& name, Mat<float>& t) {
    const auto it = tensors.find(name);
    if (it == tensors.end()) throw IoError("checkpoint " + path.string() + " lacks tensor " + name);
    const auto& raw = it->second;
    if (raw.dims.size() != 2 || raw.dims[0] != t.rows() || raw.dims[1] != t.cols())
      throw VersionError("checkpoint " + path.string() + " tensor " + name + " has a shape that disagrees with its meta.config");
    std::memcpy(t.data(), raw.data.data(), raw.data.size() * sizeof(float));
  });
  return params;
}

}  // namespace tokenar
