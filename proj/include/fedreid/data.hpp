#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "fedreid/codec.hpp"
#include "fedreid/errors.hpp"
#include "fedreid/rng.hpp"
#include "fedreid/tensor.hpp"

namespace fedreid {

enum class Split : std::uint8_t { Train = 0, Test = 1 };

// Parameters of one synthetic domain.
//
// Each identity has a prototype in a latent_dim space. An image of identity z is
// the latent vector [prototype_z + N(0, spread^2); N(0, nuisance^2)] (identity
// part followed by input_dim - latent_dim nuisance coordinates), mapped through a
// domain-specific orthogonal transform, translated, and perturbed by isotropic
// noise. The transform is orth(I + shift * G) with G ~ N(0, 1/input_dim), so
// shift controls how far the domain rotates away from the shared frame.
struct DomainSpec {
  int domain_id = 0;
  int identities = 20;
  int images_per_identity = 8;
  std::size_t input_dim = 32;
  std::size_t latent_dim = 8;
  double identity_spread = 0.5;
  double transform_shift = 0.5;
  double translation = 1.0;
  double nuisance_scale = 2.0;
  double noise_scale = 0.1;
  std::uint64_t identity_seed = 1;
  std::uint64_t transform_seed = 1;
  Split split = Split::Train;

  void validate() const {
    if (identities < 2) throw ConfigError("a domain needs at least 2 identities");
    if (images_per_identity < 2) throw ConfigError("a domain needs at least 2 images per identity");
    if (latent_dim == 0 || latent_dim > input_dim) throw ConfigError("latent dim must be in [1, input dim]");
    if (identity_spread < 0 || transform_shift < 0 || translation < 0 || nuisance_scale < 0 || noise_scale < 0) {
      throw ConfigError("domain scales must be non-negative");
    }
  }
};

// Labelled samples of one domain. Labels are dense in [0, identities); the
// global identity of a sample is (domain_id, label).
struct DomainDataset {
  int domain_id = 0;
  int identities = 0;
  Split split = Split::Train;
  Matrix features;
  std::vector<int> labels;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t input_dim() const noexcept { return features.cols(); }

  bool operator==(const DomainDataset&) const = default;
};

namespace detail {

// Modified Gram-Schmidt on the columns of a square matrix.
inline Matrix orthonormalise_columns(Matrix m) {
  const std::size_t n = m.rows();
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < j; ++k) {
      double dot = 0.0;
      for (std::size_t i = 0; i < n; ++i) dot += m(i, j) * m(i, k);
      for (std::size_t i = 0; i < n; ++i) m(i, j) -= dot * m(i, k);
    }
    double norm = 0.0;
    for (std::size_t i = 0; i < n; ++i) norm += m(i, j) * m(i, j);
    norm = std::sqrt(norm);
    if (norm < 1e-12) throw ConfigError("degenerate domain transform");
    for (std::size_t i = 0; i < n; ++i) m(i, j) /= norm;
  }
  return m;
}

}  // namespace detail

struct DomainTransform {
  Matrix rotation;  // input_dim x input_dim, orthogonal
  std::vector<double> translation;
};

inline DomainTransform make_domain_transform(const DomainSpec& spec) {
  const std::size_t d = spec.input_dim;
  Rng rng(derive_seed(spec.transform_seed, Stream::Data, 1));
  Matrix m(d, d);
  const double g_scale = spec.transform_shift / std::sqrt(static_cast<double>(d));
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) m(i, j) = (i == j ? 1.0 : 0.0) + g_scale * standard_normal(rng);
  }
  DomainTransform t{detail::orthonormalise_columns(std::move(m)), std::vector<double>(d)};
  for (double& v : t.translation) v = spec.translation * standard_normal(rng);
  return t;
}

inline Matrix make_prototypes(const DomainSpec& spec) {
  Rng rng(derive_seed(spec.identity_seed, Stream::Data, 0));
  Matrix protos(static_cast<std::size_t>(spec.identities), spec.latent_dim);
  for (double& v : protos.data()) v = standard_normal(rng);
  return protos;
}

// Deterministic function of the spec.
inline DomainDataset generate_domain(const DomainSpec& spec) {
  spec.validate();
  const std::size_t d = spec.input_dim;
  const std::size_t latent = spec.latent_dim;
  const Matrix protos = make_prototypes(spec);
  const DomainTransform transform = make_domain_transform(spec);
  Rng rng(derive_seed(mix64(spec.identity_seed) ^ spec.transform_seed, Stream::Data, 2));

  DomainDataset ds;
  ds.domain_id = spec.domain_id;
  ds.identities = spec.identities;
  ds.split = spec.split;
  const std::size_t total = static_cast<std::size_t>(spec.identities) * static_cast<std::size_t>(spec.images_per_identity);
  ds.features = Matrix(total, d);
  ds.labels.reserve(total);
  std::vector<double> u(d);
  std::size_t row = 0;
  for (int z = 0; z < spec.identities; ++z) {
    for (int img = 0; img < spec.images_per_identity; ++img, ++row) {
      for (std::size_t k = 0; k < latent; ++k) {
        u[k] = protos(static_cast<std::size_t>(z), k) + spec.identity_spread * standard_normal(rng);
      }
      for (std::size_t k = latent; k < d; ++k) u[k] = spec.nuisance_scale * standard_normal(rng);
      auto x = ds.features.row(row);
      for (std::size_t i = 0; i < d; ++i) {
        double acc = transform.translation[i];
        for (std::size_t k = 0; k < d; ++k) acc += transform.rotation(i, k) * u[k];
        x[i] = acc + spec.noise_scale * standard_normal(rng);
      }
      ds.labels.push_back(z);
    }
  }
  return ds;
}

// Per-sample augmentation applied as jitter, then feature dropout, then scaling.
struct AugmentConfig {
  double jitter = 0.0;        // additive N(0, jitter^2) per coordinate
  double dropout = 0.0;       // probability of zeroing a coordinate (no rescaling)
  double scale_jitter = 0.0;  // whole-vector scale drawn from U[1 - s, 1 + s]

  void validate() const {
    if (jitter < 0 || scale_jitter < 0 || dropout < 0 || dropout > 1) {
      throw ConfigError("augmentation scales must be non-negative and dropout in [0, 1]");
    }
  }
  bool identity() const noexcept { return jitter == 0.0 && dropout == 0.0 && scale_jitter == 0.0; }
  bool operator==(const AugmentConfig&) const = default;
};

// Stages with a zero setting draw nothing from `rng`.
inline void augment_inplace(std::span<double> x, const AugmentConfig& cfg, Rng& rng) {
  if (cfg.jitter > 0.0) {
    for (double& v : x) v += cfg.jitter * standard_normal(rng);
  }
  if (cfg.dropout > 0.0) {
    for (double& v : x) {
      if (uniform01(rng) < cfg.dropout) v = 0.0;
    }
  }
  if (cfg.scale_jitter > 0.0) {
    std::uniform_real_distribution<double> dist(1.0 - cfg.scale_jitter, 1.0 + cfg.scale_jitter);
    const double s = dist(rng);
    for (double& v : x) v *= s;
  }
}

inline std::vector<double> augment(std::span<const double> x, const AugmentConfig& cfg, Rng& rng) {
  std::vector<double> out(x.begin(), x.end());
  augment_inplace(out, cfg, rng);
  return out;
}

inline Matrix augment_batch(const Matrix& batch, const AugmentConfig& cfg, Rng& rng) {
  Matrix out = batch;
  if (cfg.identity()) return out;
  for (std::size_t r = 0; r < out.rows(); ++r) augment_inplace(out.row(r), cfg, rng);
  return out;
}

// Indices into a dataset: one query image per identity, the rest as gallery.
struct QueryGallery {
  std::vector<std::size_t> query;
  std::vector<std::size_t> gallery;
};

inline QueryGallery make_query_gallery_split(const DomainDataset& ds, Rng& rng) {
  std::vector<std::vector<std::size_t>> by_id(static_cast<std::size_t>(ds.identities));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const int y = ds.labels[i];
    if (y < 0 || y >= ds.identities) throw InputError("dataset label out of range");
    by_id[static_cast<std::size_t>(y)].push_back(i);
  }
  std::vector<bool> is_query(ds.size(), false);
  for (std::size_t z = 0; z < by_id.size(); ++z) {
    const auto& members = by_id[z];
    if (members.size() < 2) {
      throw ConfigError(concat_message("identity ", z, " has ", members.size(),
                                       " image(s); a query/gallery split needs at least 2"));
    }
    std::uniform_int_distribution<std::size_t> pick(0, members.size() - 1);
    is_query[members[pick(rng)]] = true;
  }
  QueryGallery out;
  for (std::size_t z = 0; z < by_id.size(); ++z) {
    for (std::size_t i : by_id[z]) {
      if (is_query[i]) out.query.push_back(i);
    }
  }
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (!is_query[i]) out.gallery.push_back(i);
  }
  return out;
}

// Union of several domains with labels shifted into one namespace, in input order.
inline DomainDataset merge_domains(const std::vector<DomainDataset>& domains) {
  if (domains.empty()) throw InputError("merge_domains: no domains");
  const std::size_t d = domains.front().input_dim();
  std::size_t total = 0;
  for (const auto& ds : domains) {
    if (ds.input_dim() != d) throw InputError("merge_domains: feature dims differ");
    total += ds.size();
  }
  DomainDataset out;
  out.domain_id = -1;
  out.features = Matrix(total, d);
  std::size_t row = 0;
  for (const auto& ds : domains) {
    std::copy(ds.features.data().begin(), ds.features.data().end(),
              out.features.data().begin() + static_cast<std::ptrdiff_t>(row * d));
    for (int y : ds.labels) out.labels.push_back(y + out.identities);
    out.identities += ds.identities;
    row += ds.size();
  }
  return out;
}

// Dataset file: "FDDS", u16 version, u32 domain id, u32 identities, u32 samples,
// u32 input dim, u8 split, features as f64 row-major, labels as u32, CRC32 of
// all preceding bytes. Little-endian throughout.
inline constexpr std::uint16_t kDatasetVersion = 1;

inline std::vector<std::uint8_t> encode_dataset(const DomainDataset& ds) {
  ByteWriter w;
  w.text("FDDS");
  w.u16(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(ds.domain_id));
  w.u32(static_cast<std::uint32_t>(ds.identities));
  w.u32(static_cast<std::uint32_t>(ds.size()));
  w.u32(static_cast<std::uint32_t>(ds.input_dim()));
  w.u8(static_cast<std::uint8_t>(ds.split));
  w.f64s(ds.features.data());
  for (int y : ds.labels) w.u32(static_cast<std::uint32_t>(y));
  w.crc_from(0);
  return w.take();
}

inline DomainDataset decode_dataset(std::span<const std::uint8_t> bytes) {
  ByteReader r = open_container(bytes, "FDDS");
  const std::uint16_t version = r.u16();
  if (version != kDatasetVersion) {
    throw FormatError(FormatError::Kind::MalformedHeader, concat_message("unsupported dataset version ", version));
  }
  DomainDataset ds;
  ds.domain_id = static_cast<int>(r.u32());
  ds.identities = static_cast<int>(r.u32());
  const std::size_t samples = r.u32();
  const std::size_t dim = r.u32();
  const std::uint8_t split = r.u8();
  if (split > 1) throw FormatError(FormatError::Kind::MalformedHeader, "unknown split tag");
  ds.split = static_cast<Split>(split);
  const std::size_t payload = samples * dim * sizeof(double) + samples * sizeof(std::uint32_t);
  r.need(payload);
  verify_container_crc(bytes);
  if (r.remaining() != payload) throw FormatError(FormatError::Kind::MalformedHeader, "trailing bytes after payload");
  ds.features = Matrix(samples, dim);
  r.f64s(ds.features.data());
  ds.labels.resize(samples);
  for (auto& y : ds.labels) {
    const std::uint32_t v = r.u32();
    if (v >= static_cast<std::uint32_t>(ds.identities)) {
      throw FormatError(FormatError::Kind::MalformedHeader, "label outside identity range");
    }
    y = static_cast<int>(v);
  }
  return ds;
}

inline void save_dataset(const DomainDataset& ds, const std::string& path) { write_file_bytes(path, encode_dataset(ds)); }

inline DomainDataset load_dataset(const std::string& path) { return decode_dataset(read_file_bytes(path)); }

}  // namespace fedreid
