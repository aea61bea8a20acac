// The frozen associative memory: one latent row per stored expert timestep,
// queried by exact nearest-neighbor scan. Carries the autoencoder that wrote
// it and the normalization statistics its rows were encoded under, so any
// query can be normalized the same way.
#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "reframe/autoencoder.hpp"
#include "reframe/checkpoint.hpp"
#include "reframe/common.hpp"
#include "reframe/tensor.hpp"
#include "reframe/trajectory.hpp"

namespace reframe {

struct BufferRowMeta {
  std::uint32_t traj = 0;  // index into the source trajectory list
  std::uint32_t t = 0;     // timestep within that trajectory
};

struct RetrievalHit {
  std::int64_t index = -1;
  double dist_sq = 0.0;
};

class MemoryBuffer {
 public:
  MemoryBuffer(Tensor rows, std::vector<BufferRowMeta> meta,
               AutoencoderModel model, NormStats stats, std::string source_tag)
      : rows_(std::move(rows)),
        meta_(std::move(meta)),
        model_(std::move(model)),
        stats_(std::move(stats)),
        source_tag_(std::move(source_tag)) {
    if (!model_.frozen()) throw StateError("memory buffer needs a frozen model");
    if (rows_.rank() != 2 || rows_.shape[1] != model_.config().n_latent)
      throw DimensionError("memory buffer rows must be [M x n_latent]");
    if (static_cast<std::int64_t>(meta_.size()) != rows_.shape[0])
      throw DimensionError("memory buffer metadata count mismatch");
  }

  // The degenerate no-entries buffer; retrieval from it is a state error.
  MemoryBuffer(AutoencoderModel model, NormStats stats, std::string source_tag)
      : model_(std::move(model)),
        stats_(std::move(stats)),
        source_tag_(std::move(source_tag)) {
    if (!model_.frozen()) throw StateError("memory buffer needs a frozen model");
  }

  std::int64_t size() const { return static_cast<std::int64_t>(meta_.size()); }
  std::int64_t latent_dim() const { return model_.config().n_latent; }
  const Tensor& rows() const { return rows_; }
  const BufferRowMeta& meta(std::int64_t i) const {
    return meta_[static_cast<std::size_t>(i)];
  }
  const AutoencoderModel& model() const { return model_; }
  const NormStats& stats() const { return stats_; }
  const std::string& source_tag() const { return source_tag_; }
  // lookups served since construction; lets callers assert a mode never
  // touched the buffer
  std::uint64_t lookup_count() const { return lookups_; }

  // Exact scan for argmin ||q - row||^2; ties break toward the lowest index
  // (strict '<' while scanning upward). The distance is accumulated directly,
  // component by component, so an independent oracle can match it bitwise.
  RetrievalHit retrieve_nearest(const double* q, std::int64_t width) const {
    if (size() == 0) throw StateError("retrieve_nearest: empty buffer");
    if (width != latent_dim())
      throw DimensionError("retrieve_nearest: query width " +
                           std::to_string(width) + " vs latent " +
                           std::to_string(latent_dim()));
    ++lookups_;
    RetrievalHit best;
    std::int64_t n = latent_dim();
    for (std::int64_t r = 0; r < size(); ++r) {
      const double* row = rows_.data.data() + r * n;
      double d = 0.0;
      for (std::int64_t j = 0; j < n; ++j) {
        double diff = q[j] - row[j];
        d += diff * diff;
      }
      if (best.index < 0 || d < best.dist_sq) {
        best.index = r;
        best.dist_sq = d;
      }
    }
    return best;
  }

  RetrievalHit retrieve_nearest(const std::vector<double>& q) const {
    return retrieve_nearest(q.data(), static_cast<std::int64_t>(q.size()));
  }

  Tensor row_copy(std::int64_t i) const {
    if (i < 0 || i >= size()) throw ArgumentError("row index out of range");
    Tensor out({1, latent_dim()});
    const double* src = rows_.data.data() + i * latent_dim();
    for (std::int64_t j = 0; j < latent_dim(); ++j) out.data[static_cast<std::size_t>(j)] = src[j];
    return out;
  }

  // Candidate expert action for a stored (or any) latent row.
  Tensor decode_action(const Tensor& latent) const {
    return model_.decode_act(latent);
  }

  Tensor decode_action_row(std::int64_t i) const {
    return model_.decode_act(row_copy(i));
  }

 private:
  Tensor rows_;
  std::vector<BufferRowMeta> meta_;
  AutoencoderModel model_;
  NormStats stats_;
  std::string source_tag_;
  mutable std::uint64_t lookups_ = 0;
};

// Encodes every timestep of every trajectory, in dataset order, through the
// frozen model under the dataset's own normalization.
inline MemoryBuffer build_buffer(const TrajectoryDataset& ds,
                                 const AutoencoderModel& model,
                                 const std::string& source_tag) {
  if (!model.frozen()) throw StateError("build_buffer: model must be frozen");
  if (ds.trajectories.empty()) throw ArgumentError("build_buffer: no trajectories");
  const AutoencoderConfig& cfg = model.config();
  if (ds.spec.obs_dim != cfg.obs_dim || ds.spec.act_dim != cfg.act_dim)
    throw DimensionError("build_buffer: dataset dims disagree with model");

  std::int64_t m = ds.total_steps();
  Tensor rtg({m, 1}), obs({m, cfg.obs_dim}), act({m, cfg.act_dim});
  std::vector<BufferRowMeta> meta;
  meta.reserve(static_cast<std::size_t>(m));
  std::int64_t row = 0;
  for (std::size_t ti = 0; ti < ds.trajectories.size(); ++ti) {
    const Trajectory& traj = ds.trajectories[ti];
    for (std::int64_t t = 0; t < traj.length(); ++t, ++row) {
      rtg.at(row, 0) =
          traj.returns_to_go[static_cast<std::size_t>(t)] / ds.stats.return_scale;
      for (std::int64_t j = 0; j < cfg.obs_dim; ++j)
        obs.at(row, j) =
            (traj.obs.at(t, j) - ds.stats.obs_mean[static_cast<std::size_t>(j)]) /
            ds.stats.obs_std[static_cast<std::size_t>(j)];
      for (std::int64_t j = 0; j < cfg.act_dim; ++j)
        act.at(row, j) = traj.act.at(t, j);
      meta.push_back({static_cast<std::uint32_t>(ti), static_cast<std::uint32_t>(t)});
    }
  }
  return MemoryBuffer(model.latent_of(rtg, obs, act), std::move(meta), model,
                      ds.stats, source_tag);
}

// ----------------------------------------------------------- RFMB format
//
//   magic "RFMB" | version u32 | source tag string | N_latent u64 | M u64
//   | rows f64[M*N_latent] | per-row metadata (traj u32, t u32)
//   | embedded model checkpoint ("RFNN" block) | stats block

constexpr std::uint32_t kBufferVersion = 1;

inline void save_buffer(std::ostream& os, const MemoryBuffer& buf) {
  io::write_magic(os, "RFMB", kBufferVersion);
  io::write_string(os, buf.source_tag());
  io::write_u64(os, static_cast<std::uint64_t>(buf.latent_dim()));
  io::write_u64(os, static_cast<std::uint64_t>(buf.size()));
  io::write_f64_array(os, buf.rows().data.data(), buf.rows().data.size());
  for (std::int64_t i = 0; i < buf.size(); ++i) {
    io::write_u32(os, buf.meta(i).traj);
    io::write_u32(os, buf.meta(i).t);
  }
  save_params(os, buf.model().params());
  write_stats(os, buf.stats());
}

inline MemoryBuffer load_buffer(std::istream& is) {
  io::expect_magic(is, "RFMB", kBufferVersion);
  std::string tag = io::read_string(is);
  std::uint64_t n_latent = io::read_u64(is);
  std::uint64_t m = io::read_u64(is);
  if (n_latent == 0 || n_latent > (1u << 16))
    throw FormatError("implausible latent width", io::tell(is));
  Tensor rows;
  if (m > 0) {
    rows = Tensor({static_cast<std::int64_t>(m), static_cast<std::int64_t>(n_latent)});
    io::read_f64_array(is, rows.data.data(), rows.data.size());
  }
  std::vector<BufferRowMeta> meta(m);
  for (std::uint64_t i = 0; i < m; ++i) {
    meta[i].traj = io::read_u32(is);
    meta[i].t = io::read_u32(is);
  }
  AutoencoderModel model(load_params(is));
  NormStats stats = read_stats(is);
  if (static_cast<std::int64_t>(n_latent) != model.config().n_latent)
    throw FormatError("buffer rows disagree with model latent width", io::tell(is));
  if (m == 0) return MemoryBuffer(std::move(model), std::move(stats), tag);
  return MemoryBuffer(std::move(rows), std::move(meta), std::move(model),
                      std::move(stats), tag);
}

inline void save_buffer_file(const std::string& path, const MemoryBuffer& buf) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw StateError("cannot open '" + path + "' for writing");
  save_buffer(os, buf);
  os.flush();
  if (!os) throw StateError("write failed for '" + path + "'");
}

inline MemoryBuffer load_buffer_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw StateError("cannot open '" + path + "' for reading");
  return load_buffer(is);
}

inline std::uint64_t buffer_bytes_hash(const MemoryBuffer& buf) {
  std::ostringstream os(std::ios::binary);
  save_buffer(os, buf);
  std::string s = os.str();
  return fnv1a64(s.data(), s.size());
}

}  // namespace reframe
