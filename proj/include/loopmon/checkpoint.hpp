// Self-describing binary checkpoints. A checkpoint stores a format-version
// string, a module tag (cfam | sfam), a stage tag for staged training, the
// canonical config text with its FNV-1a fingerprint, and a named tensor
// table; a whole-file fingerprint trails the archive. All integers are
// little-endian and scalars are serialized by bit pattern, so files are
// byte-identical across runs and hosts.
#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "loopmon/configfile.hpp"
#include "loopmon/errors.hpp"
#include "loopmon/nn.hpp"
#include "loopmon/tensor.hpp"

namespace loopmon {

inline constexpr const char* kCheckpointVersion = "loopmon-checkpoint-1";

template <typename T>
struct Checkpoint {
  std::string module;  // "cfam" | "sfam"
  std::string stage;   // "" | "stage1" | "stage2"
  KeyValues config;
  ParamSet<T> params;
};

namespace ckptdetail {

inline void append_u8(std::string& out, std::uint8_t v) {
  out.push_back(char(v));
}

inline void append_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline void append_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline void append_str(std::string& out, const std::string& s) {
  append_u32(out, std::uint32_t(s.size()));
  out += s;
}

inline void append_scalar(std::string& out, float v) {
  append_u32(out, std::bit_cast<std::uint32_t>(v));
}
inline void append_scalar(std::string& out, double v) {
  append_u64(out, std::bit_cast<std::uint64_t>(v));
}

class Reader {
 public:
  Reader(const std::string& buf, std::string origin)
      : buf_(buf), origin_(std::move(origin)) {}

  std::uint8_t u8() { return std::uint8_t(take(1)[0]); }

  std::uint32_t u32() {
    const char* p = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(p[i])) << (8 * i);
    return v;
  }

  std::uint64_t u64() {
    const char* p = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(std::uint8_t(p[i])) << (8 * i);
    return v;
  }

  std::string str() {
    const std::uint32_t n = u32();
    if (n > buf_.size() - pos_) fail("truncated string");
    const char* p = take(n);
    return std::string(p, n);
  }

  void scalar(float& v) { v = std::bit_cast<float>(u32()); }
  void scalar(double& v) { v = std::bit_cast<double>(u64()); }

  bool done() const { return pos_ == buf_.size(); }

  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError("checkpoint: " + origin_ + ": " + what);
  }

 private:
  const char* take(std::size_t n) {
    if (n > buf_.size() - pos_) fail("truncated file");
    const char* p = buf_.data() + pos_;
    pos_ += n;
    return p;
  }

  const std::string& buf_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace ckptdetail

template <typename T>
std::string checkpoint_bytes(const Checkpoint<T>& ck) {
  static_assert(sizeof(T) == 4 || sizeof(T) == 8);
  using namespace ckptdetail;
  std::string body;
  append_str(body, kCheckpointVersion);
  append_str(body, ck.module);
  append_str(body, ck.stage);
  const std::string cfg = ck.config.canonical();
  append_str(body, cfg);
  append_u64(body, fnv1a(cfg));
  append_u8(body, std::uint8_t(sizeof(T)));
  append_u32(body, std::uint32_t(ck.params.order.size()));
  for (const auto& name : ck.params.order) {
    const Tensor<T>& t = ck.params.values.at(name);
    append_str(body, name);
    append_u8(body, std::uint8_t(t.ndim()));
    for (int d : t.shape) append_u32(body, std::uint32_t(d));
    for (const T& v : t.data) append_scalar(body, v);
  }
  append_u64(body, fnv1a(body));
  return body;
}

template <typename T>
void save_checkpoint(const std::string& path, const Checkpoint<T>& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("checkpoint: cannot write " + path);
  const std::string bytes = checkpoint_bytes(ck);
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) throw FormatError("checkpoint: write failed for " + path);
}

template <typename T>
Checkpoint<T> parse_checkpoint(const std::string& bytes,
                               const std::string& origin) {
  static_assert(sizeof(T) == 4 || sizeof(T) == 8);
  ckptdetail::Reader r(bytes, origin);
  if (bytes.size() < 8) r.fail("truncated file");
  const std::string payload = bytes.substr(0, bytes.size() - 8);
  const std::string trailer = bytes.substr(bytes.size() - 8);
  if (fnv1a(payload) != ckptdetail::Reader(trailer, origin).u64())
    r.fail("integrity check failed");
  ckptdetail::Reader body(payload, origin);
  if (body.str() != kCheckpointVersion) body.fail("unknown format version");
  Checkpoint<T> ck;
  ck.module = body.str();
  ck.stage = body.str();
  const std::string cfg = body.str();
  if (body.u64() != fnv1a(cfg)) body.fail("config hash mismatch");
  ck.config = KeyValues::parse(cfg, origin);
  if (body.u8() != sizeof(T)) body.fail("scalar width mismatch");
  const std::uint32_t count = body.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = body.str();
    if (ck.params.has(name)) body.fail("duplicate tensor " + name);
    const int ndim = body.u8();
    if (ndim < 1 || ndim > 4) body.fail("bad rank for tensor " + name);
    std::vector<int> shape(static_cast<std::size_t>(ndim));
    std::int64_t numel = 1;
    for (int& d : shape) {
      const std::uint32_t v = body.u32();
      if (v > (1u << 24)) body.fail("bad dimension for tensor " + name);
      d = int(v);
      numel *= d;
    }
    if (numel > (std::int64_t(1) << 28)) body.fail("oversized tensor " + name);
    Tensor<T> t(shape);
    for (T& v : t.data) body.scalar(v);
    ck.params.add(name, std::move(t));
  }
  if (!body.done()) body.fail("trailing bytes");
  return ck;
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("checkpoint: cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint<T>(ss.str(), path);
}

// Compatibility gate: the archive must come from the expected module and its
// config fingerprint must match the config the caller intends to run with.
template <typename T>
void require_checkpoint(const Checkpoint<T>& ck, const std::string& module,
                        const KeyValues& config) {
  if (ck.module != module)
    throw FormatError("checkpoint: module tag is '" + ck.module +
                      "', expected '" + module + "'");
  if (fnv1a(ck.config.canonical()) != fnv1a(config.canonical()))
    throw FormatError("checkpoint: config hash mismatch for " + module);
}

}  // namespace loopmon
