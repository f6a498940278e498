#pragma once

// Versioned binary checkpoint. All integers are little-endian, reals are IEEE-754
// binary64 stored little-endian. Layout (version 1):
//
//   char[8]  magic "MMGCKPT\0"
//   u32      version = 1
//   -- MlpConfig
//   u64 x6   input_dim, width, n_blocks, time_embed_dim, cond_dim, output_dim
//   u8  x2   activation (0 silu, 1 gelu), parameterization (0 direct, 1 preconditioned)
//   f64 x2   freq_min, freq_max
//   -- ModelState
//   i64      step
//   f64      lr
//   u64      n (parameter count)
//   f64[n] x4  weights, ema_weights, adam_m, adam_v
//   -- Standardizer
//   u64 dx, f64[dx] x_mean, f64[dx] x_scale, u64 dy, f64[dy] y_mean, f64[dy] y_scale
//   -- SamplingConfig used for training
//   f64 x3   loc, scale, clip
//   u64 x2   n_points, inference_times
//   -- metadata
//   u64      length, then that many bytes of UTF-8 JSON (task descriptor, train config)
//
// The encoding is canonical: equal checkpoints produce equal bytes.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "mmg/channel.hpp"
#include "mmg/error.hpp"
#include "mmg/mlp.hpp"
#include "mmg/tasks.hpp"

namespace mmg {

inline constexpr char kCheckpointMagic[8] = {'M', 'M', 'G', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  MlpConfig mlp;
  ModelState state;
  Standardizer standardizer;
  SamplingConfig sampling;
  std::string metadata_json = "{}";

  bool operator==(const Checkpoint&) const = default;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

class Writer {
 public:
  template <class T>
  void pod(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    bytes.insert(bytes.end(), buf, buf + sizeof(T));
  }
  void u64(std::size_t v) { pod<std::uint64_t>(static_cast<std::uint64_t>(v)); }
  void reals(std::span<const double> v) {
    for (double d : v) pod(d);
  }
  void vec(const Vector& v) {
    u64(static_cast<std::size_t>(v.size()));
    reals({v.data(), static_cast<std::size_t>(v.size())});
  }
  std::vector<unsigned char> bytes;
};

class Reader {
 public:
  explicit Reader(std::span<const unsigned char> b) : b_(b) {}
  template <class T>
  T pod() {
    if (pos_ + sizeof(T) > b_.size()) throw CheckpointError("checkpoint truncated");
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, b_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
  }
  std::size_t u64() {
    const auto v = pod<std::uint64_t>();
    if (v > (1ull << 40)) throw CheckpointError("checkpoint length field out of range");
    return static_cast<std::size_t>(v);
  }
  std::vector<double> reals(std::size_t n) {
    if (pos_ + n * 8 > b_.size()) throw CheckpointError("checkpoint truncated");
    std::vector<double> v(n);
    for (auto& d : v) d = pod<double>();
    return v;
  }
  Vector vec() {
    const auto v = reals(u64());
    return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
  }
  std::string str(std::size_t n) {
    if (pos_ + n > b_.size()) throw CheckpointError("checkpoint truncated");
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  std::span<const unsigned char> b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<unsigned char> encode_checkpoint(const Checkpoint& c) {
  detail::Writer w;
  for (char ch : kCheckpointMagic) w.pod(ch);
  w.pod(kCheckpointVersion);
  const auto& m = c.mlp;
  for (std::size_t v : {m.input_dim, m.width, m.n_blocks, m.time_embed_dim, m.cond_dim, m.output_dim}) w.u64(v);
  w.pod(static_cast<std::uint8_t>(m.activation));
  w.pod(static_cast<std::uint8_t>(m.parameterization));
  w.pod(m.freq_min);
  w.pod(m.freq_max);
  const auto& s = c.state;
  const std::size_t n = s.weights.size();
  if (s.ema_weights.size() != n || s.adam_m.size() != n || s.adam_v.size() != n)
    throw CheckpointError("model state vectors have unequal lengths");
  w.pod(static_cast<std::int64_t>(s.step));
  w.pod(s.lr);
  w.u64(n);
  w.reals(s.weights);
  w.reals(s.ema_weights);
  w.reals(s.adam_m);
  w.reals(s.adam_v);
  w.vec(c.standardizer.x_mean);
  w.reals({c.standardizer.x_scale.data(), static_cast<std::size_t>(c.standardizer.x_scale.size())});
  w.vec(c.standardizer.y_mean);
  w.reals({c.standardizer.y_scale.data(), static_cast<std::size_t>(c.standardizer.y_scale.size())});
  w.pod(c.sampling.loc);
  w.pod(c.sampling.scale);
  w.pod(c.sampling.clip);
  w.u64(c.sampling.n_points);
  w.u64(c.sampling.inference_times);
  w.u64(c.metadata_json.size());
  w.bytes.insert(w.bytes.end(), c.metadata_json.begin(), c.metadata_json.end());
  return w.bytes;
}

inline Checkpoint decode_checkpoint(std::span<const unsigned char> bytes) {
  detail::Reader r(bytes);
  for (char ch : kCheckpointMagic)
    if (r.pod<char>() != ch) throw CheckpointError("not a checkpoint file (bad magic)");
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  auto& m = c.mlp;
  m.input_dim = r.u64();
  m.width = r.u64();
  m.n_blocks = r.u64();
  m.time_embed_dim = r.u64();
  m.cond_dim = r.u64();
  m.output_dim = r.u64();
  const auto act = r.pod<std::uint8_t>();
  const auto par = r.pod<std::uint8_t>();
  if (act > 1 || par > 1) throw CheckpointError("unknown activation or parameterization code");
  m.activation = static_cast<Activation>(act);
  m.parameterization = static_cast<Parameterization>(par);
  m.freq_min = r.pod<double>();
  m.freq_max = r.pod<double>();
  try {
    m.validate();
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("invalid network configuration: ") + e.what());
  }
  c.state.step = r.pod<std::int64_t>();
  c.state.lr = r.pod<double>();
  const std::size_t n = r.u64();
  if (n != parameter_count(m)) throw CheckpointError("parameter count does not match configuration");
  c.state.weights = r.reals(n);
  c.state.ema_weights = r.reals(n);
  c.state.adam_m = r.reals(n);
  c.state.adam_v = r.reals(n);
  c.standardizer.x_mean = r.vec();
  c.standardizer.x_scale = Eigen::Map<const Vector>(r.reals(static_cast<std::size_t>(c.standardizer.x_mean.size())).data(),
                                                   c.standardizer.x_mean.size());
  c.standardizer.y_mean = r.vec();
  c.standardizer.y_scale = Eigen::Map<const Vector>(r.reals(static_cast<std::size_t>(c.standardizer.y_mean.size())).data(),
                                                   c.standardizer.y_mean.size());
  c.sampling.loc = r.pod<double>();
  c.sampling.scale = r.pod<double>();
  c.sampling.clip = r.pod<double>();
  c.sampling.n_points = r.u64();
  c.sampling.inference_times = r.u64();
  c.metadata_json = r.str(r.u64());
  if (!r.done()) throw CheckpointError("trailing bytes after checkpoint");
  return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
  const auto bytes = encode_checkpoint(c);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace mmg
