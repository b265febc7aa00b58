#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <iterator>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "hpt/trajectory.hpp"

namespace hpt {

// 1/2 (G^T dW + dW^T G), or 1/2 (G dW^T + dW G^T) for the row version.
inline Mat alignment_matrix(const Mat& G, const Mat& dW, bool row_version = false) {
  if (G.rows() != dW.rows() || G.cols() != dW.cols()) throw std::invalid_argument("alignment: shape mismatch");
  if (row_version) return 0.5 * (G * dW.transpose() + dW * G.transpose());
  return 0.5 * (G.transpose() * dW + dW.transpose() * G);
}

struct AlignmentSpectrum {
  Eigen::VectorXd eigenvalues;  // length = side dimension, sorted by |lambda| descending
  Mat eigenvectors;             // side x rank; columns match the leading eigenvalues
  bool converged = true;
  int layer = -1;
  std::uint64_t step = 0;
};

// Order: |lambda| descending, then signed value descending, then source index.
inline std::vector<int> spectral_order(const Eigen::VectorXd& ev) {
  std::vector<int> idx(ev.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    const double fa = std::abs(ev(a)), fb = std::abs(ev(b));
    if (fa != fb) return fa > fb;
    if (ev(a) != ev(b)) return ev(a) > ev(b);
    return a < b;
  });
  return idx;
}

inline AlignmentSpectrum spectrum(const Mat& S) {
  if (S.rows() != S.cols()) throw std::invalid_argument("spectrum needs a square matrix");
  Eigen::SelfAdjointEigenSolver<Mat> es(S);
  AlignmentSpectrum out;
  out.converged = es.info() == Eigen::Success;
  if (!out.converged) return out;
  const auto order = spectral_order(es.eigenvalues());
  out.eigenvalues.resize(S.rows());
  out.eigenvectors.resize(S.rows(), S.rows());
  for (size_t i = 0; i < order.size(); ++i) {
    out.eigenvalues(i) = es.eigenvalues()(order[i]);
    out.eigenvectors.col(i) = es.eigenvectors().col(order[i]);
  }
  return out;
}

// Spectrum of the alignment matrix without forming it when it is low rank:
// S lives in the span of the stacked factors, so a thin QR of [A^T, B^T]
// reduces the problem to a 2r x 2r eigensolve. The remaining eigenvalues are
// exactly zero and carry no eigenvectors.
inline AlignmentSpectrum alignment_spectrum(const Mat& G, const Mat& dW, bool row_version = false) {
  if (G.rows() != dW.rows() || G.cols() != dW.cols()) throw std::invalid_argument("alignment: shape mismatch");
  const Mat A = row_version ? Mat(G.transpose()) : G;  // S = 1/2 (A^T B + B^T A)
  const Mat B = row_version ? Mat(dW.transpose()) : dW;
  const Eigen::Index side = A.cols(), inner = A.rows();
  if (2 * inner >= side) return spectrum(alignment_matrix(G, dW, row_version));
  Mat stacked(side, 2 * inner);
  stacked << A.transpose(), B.transpose();
  Eigen::HouseholderQR<Mat> qr(stacked);
  const Mat Q = qr.householderQ() * Mat::Identity(side, 2 * inner);
  const Mat Ra = Q.transpose() * A.transpose();
  const Mat Rb = Q.transpose() * B.transpose();
  const Mat C = 0.5 * (Ra * Rb.transpose() + Rb * Ra.transpose());
  auto small = spectrum(C);
  AlignmentSpectrum out;
  out.converged = small.converged;
  if (!out.converged) return out;
  out.eigenvalues = Eigen::VectorXd::Zero(side);
  Eigen::VectorXd padded = Eigen::VectorXd::Zero(side);
  padded.head(C.rows()) = small.eigenvalues;
  const auto order = spectral_order(padded);  // zeros sort after every nonzero
  Mat vecs(side, C.rows());
  int kept = 0;
  for (size_t i = 0; i < order.size(); ++i) {
    out.eigenvalues(i) = padded(order[i]);
    if (order[i] < C.rows()) vecs.col(kept++) = Q * small.eigenvectors.col(order[i]);
  }
  out.eigenvectors = vecs.leftCols(kept);
  return out;
}

inline double topk_sum(const Eigen::VectorXd& sorted_eigs, int k) {
  if (k < 1 || k > sorted_eigs.size()) throw std::out_of_range("k out of range");
  return sorted_eigs.head(k).sum();
}

inline double topk_step(const Mat& G, const Mat& dW, int k, bool row_version = false) {
  return topk_sum(alignment_spectrum(G, dW, row_version).eigenvalues, k);
}

// Row version when rows equal the width and columns do not, so k indexes
// width-sized spectra for every layer.
inline bool default_row_version(const LayerShape& l, int width) { return l.rows == width && l.cols != width; }

struct TopKCurve {
  std::vector<double> phi_k;  // k = 1..width, matrix part plus the undecomposed vector part
  double phi = 0;             // total linearized loss
  double matrix_part = 0, vector_part = 0;
  double max_trace_rel_err = 0;
  int flagged_checkpoints = 0;
  std::vector<std::uint64_t> steps;
  std::vector<double> phi_time, phi_k_time;  // cumulative, for the tracked k
};

// Streams checkpoints into cumulative top-k losses. Biases contribute their
// full inner product to every k.
class TopKAccumulator {
 public:
  TopKAccumulator(const TrajectoryManifest& m, int track_k = 0) : m_(m), track_k_(track_k) {
    curve_.phi_k.assign(m.width, 0.0);
  }

  void operator()(const Checkpoint& c) {
    double step_total = 0, step_tracked = 0;
    for (size_t l = 0; l < m_.layers.size(); ++l) {
      const auto& shape = m_.layers[l];
      const double full = (c.grad[l].array() * c.delta[l].array()).sum();
      step_total += full;
      if (!shape.is_matrix) {
        curve_.vector_part += full;
        for (double& v : curve_.phi_k) v += full;
        step_tracked += full;
        continue;
      }
      const bool row = default_row_version(shape, m_.width);
      const auto sp = alignment_spectrum(c.grad[l], c.delta[l], row);
      if (!sp.converged) {
        ++curve_.flagged_checkpoints;
        continue;
      }
      const double tr = sp.eigenvalues.sum();
      const double scale = sp.eigenvalues.cwiseAbs().sum();
      if (scale > 0) curve_.max_trace_rel_err = std::max(curve_.max_trace_rel_err, std::abs(tr - full) / scale);
      curve_.matrix_part += full;
      double run = 0;
      const auto K = std::min<Eigen::Index>(sp.eigenvalues.size(), static_cast<Eigen::Index>(curve_.phi_k.size()));
      for (Eigen::Index k = 0; k < static_cast<Eigen::Index>(curve_.phi_k.size()); ++k) {
        if (k < K) run += sp.eigenvalues(k);
        curve_.phi_k[k] += run;
      }
      if (track_k_ > 0) step_tracked += sp.eigenvalues.head(std::min<Eigen::Index>(track_k_, K)).sum();
    }
    curve_.phi += step_total;
    if (track_k_ > 0) {
      tracked_ += step_tracked;
      curve_.steps.push_back(c.step);
      curve_.phi_time.push_back(curve_.phi);
      curve_.phi_k_time.push_back(tracked_);
    }
  }

  const TopKCurve& curve() const { return curve_; }

 private:
  TrajectoryManifest m_;
  int track_k_;
  double tracked_ = 0;
  TopKCurve curve_;
};

inline TopKCurve topk_curve(const TrajectoryRecord& rec, int track_k = 0) {
  TopKAccumulator acc(rec.manifest, track_k);
  for (const auto& c : rec.checkpoints) acc(c);
  return acc.curve();
}

inline double topk_total(const TrajectoryRecord& rec, int k) {
  if (k < 1 || k > rec.manifest.width) throw std::out_of_range("k out of range");
  return topk_curve(rec).phi_k[k - 1];
}

// values[width][hp_index][k-1]; absent cells are empty vectors.
struct TopKProfile {
  std::vector<int> widths;
  std::vector<double> hps;
  std::map<int, std::vector<std::vector<double>>> values;
  std::map<int, std::vector<double>> totals;

  bool present(int n, size_t i) const { return !values.at(n)[i].empty(); }
  double phi_k(int n, size_t i, int k) const { return values.at(n)[i].at(k - 1); }
  double residual(int n, size_t i, int k) const { return totals.at(n)[i] - phi_k(n, i, k); }
};

// curves[width][hp_index]: nullopt marks a diverged or missing cell.
inline TopKProfile build_profile(const std::map<int, std::vector<std::optional<TopKCurve>>>& curves,
                                 const std::vector<double>& hps) {
  TopKProfile p;
  p.hps = hps;
  for (const auto& [n, row] : curves) {
    if (row.size() != hps.size()) throw std::invalid_argument("profile rows must match the hp grid");
    p.widths.push_back(n);
    auto& v = p.values[n];
    auto& t = p.totals[n];
    for (const auto& c : row) {
      v.push_back(c ? c->phi_k : std::vector<double>{});
      t.push_back(c ? c->phi : std::numeric_limits<double>::quiet_NaN());
    }
  }
  return p;
}

inline void write_profile_csv(const std::filesystem::path& path, const TopKProfile& p, const std::string& hash,
                              const std::vector<int>& ks = {}) {
  CsvWriter w(path, {"width", "hp", "k", "phi_k", "residual"}, hash);
  for (int n : p.widths)
    for (size_t i = 0; i < p.hps.size(); ++i) {
      if (!p.present(n, i)) continue;
      auto emit = [&](int k) { w.row(n, p.hps[i], k, p.phi_k(n, i, k), p.residual(n, i, k)); };
      if (ks.empty()) {
        for (int k = 1; k <= n; ++k) emit(k);
      } else {
        for (int k : ks)
          if (k >= 1 && k <= n) emit(k);
      }
    }
}

// psi[i][j] for sample i and component j (0-based j means index j+1).
struct SampleComponentTable {
  std::vector<int> sample_ids;
  int k_max = 0;
  Mat psi;  // P x k_max
};

// Per-sample split of the matrix-layer linearized loss:
// (dpsi)_ij = u_j^T G_i^T dW u_j (row version: u_j^T G_i dW^T u_j), with
// G_i = left_i right_i^T. Directions in the null space of S get no mass.
class SampleComponentAccumulator {
 public:
  SampleComponentAccumulator(const TrajectoryManifest& m, int P, int k_max) : m_(m) {
    if (k_max < 1 || k_max > m.width) throw std::invalid_argument("K_max must lie in [1, width]");
    table_.k_max = k_max;
    table_.psi = Mat::Zero(P, k_max);
    table_.sample_ids.resize(P);
    std::iota(table_.sample_ids.begin(), table_.sample_ids.end(), 0);
  }

  void operator()(const Checkpoint& c) {
    if (c.factors.empty()) throw std::invalid_argument("checkpoint lacks per-sample factors");
    for (size_t l = 0; l < m_.layers.size(); ++l) {
      const auto& shape = m_.layers[l];
      if (!shape.is_matrix) continue;
      const auto& f = c.factors.at(shape.layer);
      const bool row = default_row_version(shape, m_.width);
      const auto sp = alignment_spectrum(c.grad[l], c.delta[l], row);
      if (!sp.converged) continue;
      const Eigen::Index K = std::min<Eigen::Index>(sp.eigenvectors.cols(), table_.k_max);
      if (K == 0) continue;
      const Mat U = sp.eigenvectors.leftCols(K);
      Mat a, b;
      if (row) {
        a = f.left.transpose() * U;
        b = f.right.transpose() * (c.delta[l].transpose() * U);
      } else {
        a = f.right.transpose() * U;
        b = f.left.transpose() * (c.delta[l] * U);
      }
      table_.psi.leftCols(K).array() += a.array() * b.array();
    }
  }

  const SampleComponentTable& table() const { return table_; }

 private:
  TrajectoryManifest m_;
  SampleComponentTable table_;
};

inline std::optional<double> mci(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
  const double mass = row.cwiseAbs().sum();
  if (!(mass > 0)) return std::nullopt;
  double s = 0;
  for (Eigen::Index j = 0; j < row.size(); ++j) s += static_cast<double>(j + 1) * std::abs(row(j)) / mass;
  return s;
}

inline std::vector<double> mci_column(const SampleComponentTable& t) {
  std::vector<double> out;
  for (Eigen::Index i = 0; i < t.psi.rows(); ++i) {
    const auto v = mci(t.psi.row(i));
    out.push_back(v ? *v : std::numeric_limits<double>::quiet_NaN());
  }
  return out;
}

inline void write_mci_csv(const std::filesystem::path& path, const SampleComponentTable& t, const std::string& hash) {
  std::vector<std::string> header{"sample_id", "mci"};
  for (int j = 1; j <= t.k_max; ++j) header.push_back("psi_" + std::to_string(j));
  CsvWriter w(path, header, hash);
  const auto m = mci_column(t);
  for (Eigen::Index i = 0; i < t.psi.rows(); ++i) {
    std::vector<std::string> cells{std::to_string(t.sample_ids[i]), std::isnan(m[i]) ? "" : fmt17(m[i])};
    for (int j = 0; j < t.k_max; ++j) cells.push_back(fmt17(t.psi(i, j)));
    w.row_cells(cells);
  }
}

enum class QuantileSide { top, bottom };

// Sample ids of the q-quantile set by MCI (undefined entries skipped), ties by id.
inline std::vector<int> quantile_set(const std::vector<double>& mci_by_id, double q, QuantileSide side) {
  std::vector<int> ids;
  for (size_t i = 0; i < mci_by_id.size(); ++i)
    if (!std::isnan(mci_by_id[i])) ids.push_back(static_cast<int>(i));
  std::stable_sort(ids.begin(), ids.end(), [&](int a, int b) {
    return side == QuantileSide::top ? mci_by_id[a] > mci_by_id[b] : mci_by_id[a] < mci_by_id[b];
  });
  const auto keep = static_cast<size_t>(std::floor(q * static_cast<double>(mci_by_id.size())));
  ids.resize(std::min(ids.size(), keep));
  std::sort(ids.begin(), ids.end());
  return ids;
}

struct OverlapMatrix {
  std::vector<int> widths;
  Mat overlap;  // widths x widths
};

// tables[(width, seed)] = MCI per shared sample id.
inline OverlapMatrix overlap_consistency(const std::map<std::pair<int, int>, std::vector<double>>& tables, double q,
                                         QuantileSide side) {
  if (!(q > 0 && q <= 0.5)) throw std::invalid_argument("q must lie in (0, 0.5]");
  std::map<int, std::vector<std::pair<int, std::vector<int>>>> by_width;
  size_t P = 0;
  for (const auto& [key, m] : tables) {
    if (P == 0) P = m.size();
    if (m.size() != P) throw std::invalid_argument("MCI tables must share sample ids");
    by_width[key.first].emplace_back(key.second, quantile_set(m, q, side));
  }
  OverlapMatrix out;
  for (const auto& [n, _] : by_width) out.widths.push_back(n);
  const auto W = out.widths.size();
  out.overlap = Mat::Zero(W, W);
  const double denom = std::floor(q * static_cast<double>(P));
  for (size_t a = 0; a < W; ++a)
    for (size_t b = 0; b < W; ++b) {
      const auto& A = by_width[out.widths[a]];
      const auto& B = by_width[out.widths[b]];
      double acc = 0;
      int pairs = 0;
      for (const auto& [sa, setA] : A)
        for (const auto& [sb, setB] : B) {
          if (a == b && sa == sb) continue;
          std::vector<int> inter;
          std::set_intersection(setA.begin(), setA.end(), setB.begin(), setB.end(), std::back_inserter(inter));
          acc += inter.size() / denom;
          ++pairs;
        }
      if (pairs == 0) throw std::invalid_argument("need >= 2 seeds per width for the diagonal");
      out.overlap(a, b) = acc / pairs;
    }
  return out;
}

}  // namespace hpt
