// RFNN checkpoint format: every named tensor of a ParamStore, in insertion
// order, as little-endian f64. Round-trips are bit-exact.
//
// Layout:
//   magic "RFNN" | version u32 | tensor count u64
//   per tensor:  name (u32 length + UTF-8) | rank u64 | dims u64[rank] | f64[numel]
#pragma once

#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "reframe/common.hpp"
#include "reframe/param_store.hpp"

namespace reframe {

constexpr std::uint32_t kCheckpointVersion = 1;
constexpr std::int64_t kMaxTensorRank = 8;

inline void save_params(std::ostream& os, const ParamStore& store) {
  io::write_magic(os, "RFNN", kCheckpointVersion);
  io::write_u64(os, static_cast<std::uint64_t>(store.names().size()));
  for (const std::string& name : store.names()) {
    const Tensor& t = store.value(name);
    io::write_string(os, name);
    io::write_u64(os, static_cast<std::uint64_t>(t.rank()));
    for (std::int64_t d : t.shape) io::write_u64(os, static_cast<std::uint64_t>(d));
    io::write_f64_array(os, t.data.data(), t.data.size());
  }
}

// Parses a full store before returning, so a truncated or corrupt stream
// never yields a partially-filled result.
inline ParamStore load_params(std::istream& is) {
  io::expect_magic(is, "RFNN", kCheckpointVersion);
  std::uint64_t count = io::read_u64(is);
  ParamStore store;
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = io::read_string(is);
    std::uint64_t rank = io::read_u64(is);
    if (rank > static_cast<std::uint64_t>(kMaxTensorRank))
      throw FormatError("tensor '" + name + "' has implausible rank " +
                            std::to_string(rank),
                        io::tell(is));
    std::vector<std::int64_t> shape(rank);
    for (std::uint64_t r = 0; r < rank; ++r)
      shape[r] = static_cast<std::int64_t>(io::read_u64(is));
    Tensor t(std::move(shape));
    io::read_f64_array(is, t.data.data(), t.data.size());
    store.add(name, std::move(t));
  }
  return store;
}

inline void save_params_file(const std::string& path, const ParamStore& store) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw StateError("cannot open '" + path + "' for writing");
  save_params(os, store);
  os.flush();
  if (!os) throw StateError("write failed for '" + path + "'");
}

inline ParamStore load_params_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw StateError("cannot open '" + path + "' for reading");
  return load_params(is);
}

}  // namespace reframe
