// SPDX-License-Identifier: Apache-2.0
#include "curvloc/synthetic_data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "curvloc/binary_io.hpp"
#include "curvloc/random.hpp"

namespace curvloc::data {

namespace {

constexpr std::uint32_t kDatasetVersion = 1;

Dataset unconditional(Matrix samples, std::string name) {
  Dataset ds;
  ds.conds.assign(static_cast<std::size_t>(samples.cols()), diffusion::kNullCondition);
  ds.outlier.assign(static_cast<std::size_t>(samples.cols()), 0);
  ds.width = static_cast<int>(samples.rows());
  ds.samples = std::move(samples);
  ds.name = std::move(name);
  return ds;
}

}  // namespace

const char* category_name(Category c) {
  switch (c) {
    case Category::TemplateVerbatim: return "template_verbatim";
    case Category::GlobalMem: return "global_mem";
    case Category::NonMem: return "non_mem";
  }
  return "unknown";
}

Category parse_category(const std::string& name) {
  if (name == "template_verbatim") return Category::TemplateVerbatim;
  if (name == "global_mem") return Category::GlobalMem;
  if (name == "non_mem") return Category::NonMem;
  throw std::invalid_argument("unknown category '" + name + "'");
}

double mask_fraction(const Mask& m) {
  if (m.empty()) return 0.0;
  const auto on = std::count_if(m.begin(), m.end(), [](std::uint8_t v) { return v != 0; });
  return static_cast<double>(on) / static_cast<double>(m.size());
}

void Dataset::validate() const {
  if (channels < 1 || height < 1 || width < 1) throw std::invalid_argument("dataset grid must be positive");
  if (samples.rows() != dim()) throw std::invalid_argument("sample dimension does not match the grid");
  const auto n = static_cast<std::size_t>(samples.cols());
  if (conds.size() != n || outlier.size() != n) throw std::invalid_argument("per-sample arrays have wrong length");
  if (masks.size() != categories.size() || mask_provenance.size() != categories.size()) {
    throw std::invalid_argument("every condition needs exactly one mask");
  }
  for (CondId c : conds) {
    const bool ok = num_conditions() == 0 ? c == diffusion::kNullCondition : (c >= 0 && c < num_conditions());
    if (!ok) throw std::invalid_argument("sample refers to unknown condition " + std::to_string(c));
  }
  for (int c = 0; c < num_conditions(); ++c) {
    const Mask& m = masks[static_cast<std::size_t>(c)];
    if (m.size() != static_cast<std::size_t>(dim())) throw std::invalid_argument("mask has wrong size");
    const double f = mask_fraction(m);
    switch (categories[static_cast<std::size_t>(c)]) {
      case Category::TemplateVerbatim:
        if (f == 0.0 || f == 1.0) throw std::invalid_argument("template mask must be nonempty and not full");
        break;
      case Category::GlobalMem:
        if (f != 1.0) throw std::invalid_argument("global-mem mask must be all ones");
        break;
      case Category::NonMem:
        if (f != 0.0) throw std::invalid_argument("non-mem mask must be all zeros");
        break;
    }
  }
  if (!samples.allFinite()) throw std::invalid_argument("dataset contains non-finite samples");
}

Dataset gen_linear_gaussian(const Matrix& A, double sigma, std::size_t n, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("gen_linear_gaussian needs n >= 1");
  if (!(sigma >= 0.0)) throw std::invalid_argument("gen_linear_gaussian needs sigma >= 0");
  Rng rng = make_rng(seed, {0x11});
  const auto N = static_cast<Eigen::Index>(n);
  const Matrix z = standard_normal(A.cols(), N, rng);
  const Matrix eps = standard_normal(A.rows(), N, rng);
  Dataset ds = unconditional(A * z + sigma * eps, "linear_gaussian");
  ds.validate();
  return ds;
}

void DuplicatedOutlierSpec::validate() const {
  if (N < 1) throw diffusion::ConfigError("duplicated-outlier N must be positive");
  if (!(rho > 0.0 && rho < 1.0)) throw diffusion::ConfigError("duplication ratio must lie in (0, 1)");
  if (!(sigma_dup < sigma_data) || !(sigma_dup >= 0.0)) {
    throw diffusion::ConfigError("need 0 <= sigma_dup < sigma_data");
  }
  if (A_row.size() != x_dup.size()) throw diffusion::ConfigError("A_row and x_dup must have equal length");
}

std::size_t DuplicatedOutlierSpec::outlier_count() const {
  return static_cast<std::size_t>(std::llround(rho * static_cast<double>(N)));
}

Dataset gen_duplicated_outlier(const DuplicatedOutlierSpec& spec) {
  spec.validate();
  const auto d = spec.A_row.size();
  const auto n_out = static_cast<Eigen::Index>(spec.outlier_count());
  const auto n_man = static_cast<Eigen::Index>(spec.N) - n_out;
  Rng rng = make_rng(spec.seed, {0xD0});
  Matrix x(d, static_cast<Eigen::Index>(spec.N));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Eigen::Index j = 0; j < n_man; ++j) {
    const double z = normal(rng);
    for (Eigen::Index i = 0; i < d; ++i) x(i, j) = spec.A_row(i) * z + spec.sigma_data * normal(rng);
  }
  for (Eigen::Index j = n_man; j < n_man + n_out; ++j) {
    for (Eigen::Index i = 0; i < d; ++i) x(i, j) = spec.x_dup(i) + spec.sigma_dup * normal(rng);
  }
  Dataset ds = unconditional(std::move(x), "duplicated_outlier");
  std::fill(ds.outlier.begin() + n_man, ds.outlier.end(), 1);
  ds.validate();
  return ds;
}

void ToyMemSpec::validate() const {
  if (channels < 1 || height < 1 || width < 1) throw diffusion::ConfigError("toy grid must be positive");
  if (n_template < 0 || n_global < 0 || n_nonmem < 0 || num_conditions() == 0) {
    throw diffusion::ConfigError("toy benchmark needs at least one condition");
  }
  if (samples_per_condition < 1) throw diffusion::ConfigError("samples_per_condition must be positive");
  if (!(template_std > 0.0 && background_std > 0.0 && free_noise_std > 0.0)) {
    throw diffusion::ConfigError("toy noise levels must be positive");
  }
  if (free_rank < 0) throw diffusion::ConfigError("free_rank must be nonnegative");
  if (background_rows_min < 0 || background_rows_max < background_rows_min || background_rows_max > template_row_min) {
    throw diffusion::ConfigError("background band must end before the template rows");
  }
  if (rect_min < 1 || rect_max < rect_min || template_row_min + rect_max > height || rect_max > width) {
    throw diffusion::ConfigError("template rectangles do not fit the grid");
  }
  if (rect_max == height && rect_max == width && channels == 1) {
    throw diffusion::ConfigError("template rectangles could cover the whole grid");
  }
}

std::vector<ToyCondition> toy_conditions(const ToyMemSpec& spec) {
  spec.validate();
  const int d = spec.dim();
  const int hw = spec.height * spec.width;
  Rng rng = make_rng(spec.seed, {0xC0});
  std::normal_distribution<double> normal(0.0, 1.0);
  auto uniform_int = [&rng](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };

  std::vector<ToyCondition> out;
  auto add = [&](Category cat) {
    ToyCondition c;
    c.category = cat;
    c.background_rows = uniform_int(spec.background_rows_min, spec.background_rows_max);
    c.mask.assign(static_cast<std::size_t>(d), 0);
    c.constrained.assign(static_cast<std::size_t>(d), 0);
    c.mean = Vector::Zero(d);
    for (int i = 0; i < d; ++i) c.mean(i) = spec.condition_mean_std * normal(rng);

    if (cat == Category::TemplateVerbatim) {
      const int h = uniform_int(spec.rect_min, spec.rect_max);
      const int w = uniform_int(spec.rect_min, spec.rect_max);
      const int r0 = uniform_int(spec.template_row_min, spec.height - h);
      const int c0 = uniform_int(0, spec.width - w);
      for (int ch = 0; ch < spec.channels; ++ch) {
        for (int r = r0; r < r0 + h; ++r) {
          for (int col = c0; col < c0 + w; ++col) c.mask[static_cast<std::size_t>(ch * hw + r * spec.width + col)] = 1;
        }
      }
    } else if (cat == Category::GlobalMem) {
      std::fill(c.mask.begin(), c.mask.end(), 1);
    }
    for (int i = 0; i < d; ++i) {
      if (c.mask[static_cast<std::size_t>(i)] != 0) {
        c.mean(i) = spec.template_scale * normal(rng);
        c.constrained[static_cast<std::size_t>(i)] = 1;
      }
    }
    for (int ch = 0; ch < spec.channels; ++ch) {
      for (int r = 0; r < c.background_rows; ++r) {
        for (int col = 0; col < spec.width; ++col) {
          const int i = ch * hw + r * spec.width + col;
          c.mean(i) = 0.0;
          c.constrained[static_cast<std::size_t>(i)] = 1;
        }
      }
    }
    out.push_back(std::move(c));
  };
  for (int i = 0; i < spec.n_template; ++i) add(Category::TemplateVerbatim);
  for (int i = 0; i < spec.n_global; ++i) add(Category::GlobalMem);
  for (int i = 0; i < spec.n_nonmem; ++i) add(Category::NonMem);
  return out;
}

Dataset gen_toy_memorization(const ToyMemSpec& spec) {
  const auto conds = toy_conditions(spec);
  const int d = spec.dim();
  const int per = spec.samples_per_condition;

  Rng factor_rng = make_rng(spec.seed, {0xFA});
  const double loading = spec.free_rank > 0 ? spec.free_factor_scale / std::sqrt(static_cast<double>(spec.free_rank)) : 0.0;
  const Matrix F = loading * standard_normal(d, spec.free_rank, factor_rng);

  Dataset ds;
  ds.name = "toy_memorization";
  ds.channels = spec.channels;
  ds.height = spec.height;
  ds.width = spec.width;
  ds.samples.resize(d, static_cast<Eigen::Index>(conds.size()) * per);
  Eigen::Index col = 0;
  for (std::size_t c = 0; c < conds.size(); ++c) {
    const ToyCondition& tc = conds[c];
    Rng rng = make_rng(spec.seed, {0x5A, c});
    for (int s = 0; s < per; ++s, ++col) {
      const Vector z = standard_normal(spec.free_rank, rng);
      const Vector eta = standard_normal(d, rng);
      const Vector free = F * z;
      for (int i = 0; i < d; ++i) {
        const auto ui = static_cast<std::size_t>(i);
        double v = tc.mean(i);
        if (tc.mask[ui] != 0) {
          v += spec.template_std * eta(i);
        } else if (tc.constrained[ui] != 0) {
          v += spec.background_std * eta(i);
        } else {
          v += free(i) + spec.free_noise_std * eta(i);
        }
        ds.samples(i, col) = v;
      }
      ds.conds.push_back(static_cast<CondId>(c));
    }
    ds.categories.push_back(tc.category);
    ds.masks.push_back(tc.mask);
    switch (tc.category) {
      case Category::TemplateVerbatim: {
        ds.mask_provenance.push_back("pinned template rectangle (" +
                                     std::to_string(std::count(tc.mask.begin(), tc.mask.end(), 1)) + " cells)");
        break;
      }
      case Category::GlobalMem: ds.mask_provenance.push_back("all-ones (fully pinned condition)"); break;
      case Category::NonMem: ds.mask_provenance.push_back("all-zeros (no pinned content)"); break;
    }
  }
  ds.outlier.assign(ds.conds.size(), 0);
  ds.validate();
  return ds;
}

std::vector<int> balanced_conditions(const Dataset& ds, std::span<const Category> include, std::uint64_t seed) {
  std::vector<std::vector<int>> groups(include.size());
  for (int c = 0; c < ds.num_conditions(); ++c) {
    for (std::size_t g = 0; g < include.size(); ++g) {
      if (ds.categories[static_cast<std::size_t>(c)] == include[g]) groups[g].push_back(c);
    }
  }
  std::size_t smallest = groups.empty() ? 0 : groups.front().size();
  for (const auto& g : groups) smallest = std::min(smallest, g.size());

  std::vector<int> out;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    auto& members = groups[g];
    if (members.size() > smallest) {
      Rng rng = make_rng(seed, {0xBA, g});
      std::vector<int> pick(members.size());
      std::iota(pick.begin(), pick.end(), 0);
      std::shuffle(pick.begin(), pick.end(), rng);
      pick.resize(smallest);
      std::sort(pick.begin(), pick.end());
      std::vector<int> kept;
      for (int p : pick) kept.push_back(members[static_cast<std::size_t>(p)]);
      members = std::move(kept);
    }
    out.insert(out.end(), members.begin(), members.end());
  }
  std::sort(out.begin(), out.end());
  return out;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& path) {
  ds.validate();
  io::ByteWriter w;
  w.magic("CLDS");
  w.u32(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(ds.channels));
  w.u32(static_cast<std::uint32_t>(ds.height));
  w.u32(static_cast<std::uint32_t>(ds.width));
  w.u64(static_cast<std::uint64_t>(ds.size()));
  w.u32(static_cast<std::uint32_t>(ds.num_conditions()));
  w.str(ds.name);
  for (std::size_t j = 0; j < ds.conds.size(); ++j) {
    w.i32(ds.conds[j]);
    w.u8(ds.outlier[j]);
  }
  for (Eigen::Index j = 0; j < ds.size(); ++j) {
    for (Eigen::Index i = 0; i < ds.samples.rows(); ++i) w.f64(ds.samples(i, j));
  }
  for (int c = 0; c < ds.num_conditions(); ++c) {
    const auto uc = static_cast<std::size_t>(c);
    w.u8(static_cast<std::uint8_t>(ds.categories[uc]));
    w.str(ds.mask_provenance[uc]);
    const Mask& m = ds.masks[uc];
    for (std::size_t byte = 0; byte < (m.size() + 7) / 8; ++byte) {
      std::uint8_t packed = 0;
      for (std::size_t bit = 0; bit < 8 && byte * 8 + bit < m.size(); ++bit) {
        if (m[byte * 8 + bit] != 0) packed |= static_cast<std::uint8_t>(1U << bit);
      }
      w.u8(packed);
    }
  }
  w.write_file(path);
}

Dataset load_dataset(const std::filesystem::path& path) {
  auto r = io::ByteReader::from_file(path);
  r.expect_magic("CLDS");
  if (r.u32() != kDatasetVersion) throw io::FormatError(path.string() + ": unsupported dataset version");
  Dataset ds;
  ds.channels = static_cast<int>(r.u32());
  ds.height = static_cast<int>(r.u32());
  ds.width = static_cast<int>(r.u32());
  const std::uint64_t n = r.u64();
  const std::uint32_t nc = r.u32();
  ds.name = r.str();
  const auto d = static_cast<Eigen::Index>(ds.channels) * ds.height * ds.width;
  if (n > r.remaining()) throw io::FormatError(path.string() + ": truncated payload");
  ds.conds.resize(n);
  ds.outlier.resize(n);
  for (std::size_t j = 0; j < n; ++j) {
    ds.conds[j] = r.i32();
    ds.outlier[j] = r.u8();
  }
  ds.samples.resize(d, static_cast<Eigen::Index>(n));
  const auto flat = r.f64s(static_cast<std::size_t>(d) * n);
  std::copy(flat.begin(), flat.end(), ds.samples.data());
  for (std::uint32_t c = 0; c < nc; ++c) {
    const std::uint8_t cat = r.u8();
    if (cat > 2) throw io::FormatError(path.string() + ": bad category tag");
    ds.categories.push_back(static_cast<Category>(cat));
    ds.mask_provenance.push_back(r.str());
    const auto packed = r.raw((static_cast<std::size_t>(d) + 7) / 8);
    Mask m(static_cast<std::size_t>(d));
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = (packed[i / 8] >> (i % 8)) & 1U;
    ds.masks.push_back(std::move(m));
  }
  r.expect_end();
  try {
    ds.validate();
  } catch (const std::invalid_argument& e) {
    throw io::FormatError(path.string() + ": " + e.what());
  }
  return ds;
}

std::string dataset_manifest(const Dataset& ds) {
  nlohmann::ordered_json j;
  j["name"] = ds.name;
  j["channels"] = ds.channels;
  j["height"] = ds.height;
  j["width"] = ds.width;
  j["samples"] = ds.size();
  j["outliers"] = std::count(ds.outlier.begin(), ds.outlier.end(), 1);
  auto conds = nlohmann::ordered_json::array();
  for (int c = 0; c < ds.num_conditions(); ++c) {
    const auto uc = static_cast<std::size_t>(c);
    conds.push_back({{"id", c},
                     {"category", category_name(ds.categories[uc])},
                     {"samples", std::count(ds.conds.begin(), ds.conds.end(), c)},
                     {"mask_fraction", mask_fraction(ds.masks[uc])},
                     {"mask_provenance", ds.mask_provenance[uc]}});
  }
  j["conditions"] = std::move(conds);
  return j.dump(2) + "\n";
}

}  // namespace curvloc::data
