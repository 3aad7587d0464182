#include "wbm/checkpoint.hpp"

#include <cstring>

#include "wbm/errors.hpp"
#include "wbm/io.hpp"

namespace wbm::checkpoint {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out += static_cast<char>((v >> (8 * i)) & 0xff);
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out += static_cast<char>((v >> (8 * i)) & 0xff);
}

void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

void put_f64(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(out, bits);
}

struct Cursor {
  const std::string& bytes;
  std::size_t pos = 0;

  void need(std::size_t n, const char* what) {
    if (pos + n > bytes.size()) throw IoError(std::string("truncated checkpoint at ") + what);
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  float f32(const char* what) {
    std::uint32_t bits = u32(what);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }
  double f64(const char* what) {
    std::uint64_t bits = u64(what);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes.substr(pos, n);
    pos += n;
    return s;
  }
};

std::uint64_t fnv1a_bytes(const std::string& bytes, std::size_t n) {
  std::uint64_t h = 1469598103934665603ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(bytes[i]);
    h *= 1099511628211ull;
  }
  return h;
}

void put_tree(std::string& out, const nn::ParamTree<float>& tree) {
  put_u32(out, static_cast<std::uint32_t>(tree.tensors.size()));
  for (const auto& [name, tensor] : tree.tensors) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(tensor.rows()));
    put_u32(out, static_cast<std::uint32_t>(tensor.cols()));
    for (Eigen::Index i = 0; i < tensor.rows(); ++i) {
      for (Eigen::Index j = 0; j < tensor.cols(); ++j) put_f32(out, tensor(i, j));
    }
  }
}

nn::ParamTree<float> read_tree(Cursor& c) {
  nn::ParamTree<float> tree;
  std::uint32_t count = c.u32("tensor count");
  for (std::uint32_t k = 0; k < count; ++k) {
    std::uint32_t name_len = c.u32("name length");
    std::string name = c.str(name_len, "tensor name");
    Eigen::Index rows = c.u32("rows");
    Eigen::Index cols = c.u32("cols");
    MatrixF tensor(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
      for (Eigen::Index j = 0; j < cols; ++j) tensor(i, j) = c.f32("tensor data");
    }
    tree.add(name, std::move(tensor));
  }
  return tree;
}

}  // namespace

std::string to_bytes(const Checkpoint& ckpt) {
  std::string out = "WBMC";
  put_u32(out, 1);
  std::string cfg = ckpt.config.to_json();
  put_u32(out, static_cast<std::uint32_t>(cfg.size()));
  out += cfg;
  put_u32(out, kNumVariables);
  for (int v = 0; v < kNumVariables; ++v) {
    put_f64(out, ckpt.stats.mean[static_cast<std::size_t>(v)]);
    put_f64(out, ckpt.stats.stddev[static_cast<std::size_t>(v)]);
    out += static_cast<char>(ckpt.stats.observed_in_train[static_cast<std::size_t>(v)] ? 1 : 0);
  }
  put_f64(out, ckpt.stats.clip_lo);
  put_f64(out, ckpt.stats.clip_hi);
  put_tree(out, ckpt.params);
  put_tree(out, ckpt.state);
  put_u64(out, fnv1a_bytes(out, out.size()));
  return out;
}

Checkpoint from_bytes(const std::string& bytes) {
  if (bytes.size() < 16 || bytes.compare(0, 4, "WBMC") != 0) {
    throw IoError("bad checkpoint magic");
  }
  std::uint64_t stored = 0;
  for (int i = 0; i < 8; ++i) {
    stored |= std::uint64_t(static_cast<unsigned char>(bytes[bytes.size() - 8 + static_cast<std::size_t>(i)]))
              << (8 * i);
  }
  if (fnv1a_bytes(bytes, bytes.size() - 8) != stored) {
    throw IoError("checkpoint checksum mismatch");
  }

  Cursor c{bytes, 4};
  std::uint32_t version = c.u32("version");
  if (version != 1) throw IoError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  std::uint32_t cfg_len = c.u32("config length");
  ckpt.config = model::ModelConfig::from_json(c.str(cfg_len, "config json"));
  std::uint32_t n_vars = c.u32("variable count");
  if (n_vars != kNumVariables) throw IoError("checkpoint variable count mismatch");
  for (int v = 0; v < kNumVariables; ++v) {
    ckpt.stats.mean[static_cast<std::size_t>(v)] = c.f64("norm mean");
    ckpt.stats.stddev[static_cast<std::size_t>(v)] = c.f64("norm std");
    c.need(1, "norm observed flag");
    ckpt.stats.observed_in_train[static_cast<std::size_t>(v)] = bytes[c.pos++] != 0;
  }
  ckpt.stats.clip_lo = c.f64("clip lo");
  ckpt.stats.clip_hi = c.f64("clip hi");
  ckpt.params = read_tree(c);
  ckpt.state = read_tree(c);
  if (c.pos != bytes.size() - 8) throw IoError("trailing bytes in checkpoint");
  return ckpt;
}

void save(const std::filesystem::path& path, const Checkpoint& ckpt) {
  io::atomic_write(path, to_bytes(ckpt));
}

Checkpoint load(const std::filesystem::path& path) { return from_bytes(io::read_file(path)); }

void check_params_match(const nn::ParamTree<float>& expected, const nn::ParamTree<float>& actual) {
  expected.check_congruent(actual, "checkpoint parameters");
}

}  // namespace wbm::checkpoint
