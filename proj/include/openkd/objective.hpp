#pragma once

// Heatmap regression, intra-/cross-modality contrastive losses and their
// weighted total.

#include <optional>
#include <string>
#include <vector>

#include "openkd/autodiff.hpp"
#include "openkd/detector.hpp"
#include "openkd/errors.hpp"

namespace openkd::objective {

struct LossConfig {
  double lambda1 = 1.0;    // heatmap regression
  double lambda2 = 0.002;  // textual-textual contrast
  double lambda3 = 0.002;  // visual-textual contrast
  double tau = 0.05;
  bool use_vv = false;     // optional visual-visual term for ablations
  std::string vt_pairing = "episode";  // or "cross_species"

  void validate() const {
    if (!(tau > 0)) throw ConfigurationError("loss.tau must be positive");
    if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0) throw ConfigurationError("loss weights must be non-negative");
    if (vt_pairing != "episode" && vt_pairing != "cross_species")
      throw ConfigurationError("loss.vt_pairing must be 'episode' or 'cross_species'");
  }
};

struct SimilarityMatrix {
  Tensor values;  // N x N cosines
};

// Mean over present modalities of the per-group MSE (averaged over pixels
// and keypoints).
inline ad::Var heatmap_loss(const std::optional<detector::HeatmapGroup>& hv,
                            const std::optional<detector::HeatmapGroup>& ht,
                            const std::vector<Tensor>& gt) {
  if (!hv && !ht) throw ArgumentError("heatmap loss needs at least one predicted group");
  auto group_mse = [&gt](const detector::HeatmapGroup& g) {
    if (g.maps.size() != gt.size()) throw DimensionError("prediction and ground-truth group sizes differ");
    std::vector<ad::Var> terms;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (g.maps[i].grid.shape() != gt[i].shape())
        throw DimensionError("heatmap " + shape_str(g.maps[i].grid.shape()) + " vs ground truth " +
                             shape_str(gt[i].shape()));
      terms.push_back(ad::mse(g.maps[i].grid, ad::constant(gt[i])));
    }
    return ad::average(terms);
  };
  if (hv && ht) return ad::scale(ad::add(group_mse(*hv), group_mse(*ht)), 0.5);
  return group_mse(hv ? *hv : *ht);
}

inline ad::Var similarity(const std::vector<ad::Var>& a, const std::vector<ad::Var>& b) {
  if (a.size() != b.size() || a.empty()) throw DimensionError("similarity matrix needs two equal, non-empty lists");
  return ad::cosine_matrix(ad::stack_rows(a), ad::stack_rows(b));
}

inline SimilarityMatrix similarity_matrix(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  std::vector<ad::Var> va, vb;
  for (const auto& t : a) va.push_back(ad::constant(t));
  for (const auto& t : b) vb.push_back(ad::constant(t));
  return {similarity(va, vb).value()};
}

// 1/2 (L^{a->b} + L^{b->a}), each the mean over rows of the negative
// diagonal log-softmax of J / tau. Row i of `a` is positive with row i of `b`.
inline ad::Var symmetric_contrastive(const std::vector<ad::Var>& a, const std::vector<ad::Var>& b, double tau) {
  if (!(tau > 0)) throw ConfigurationError("temperature must be positive");
  auto j = ad::scale(similarity(a, b), 1.0 / tau);
  auto forward = ad::mean_diagonal(ad::log_softmax_rows(j));
  auto backward = ad::mean_diagonal(ad::log_softmax_rows(ad::transpose(j)));
  return ad::scale(ad::add(forward, backward), -0.5);
}

inline ad::Var contrastive_tt(const std::vector<ad::Var>& species_a, const std::vector<ad::Var>& species_b,
                              double tau) {
  return symmetric_contrastive(species_a, species_b, tau);
}

// Textual prototypes enter detached, so gradients reach only the visual side.
inline ad::Var contrastive_vt(const std::vector<ad::Var>& visual, const std::vector<ad::Var>& textual, double tau) {
  std::vector<ad::Var> frozen;
  for (const auto& t : textual) frozen.push_back(ad::detach(t));
  return symmetric_contrastive(visual, frozen, tau);
}

inline double contrastive_tt(const std::vector<Tensor>& a, const std::vector<Tensor>& b, double tau) {
  std::vector<ad::Var> va, vb;
  for (const auto& t : a) va.push_back(ad::constant(t));
  for (const auto& t : b) vb.push_back(ad::constant(t));
  return contrastive_tt(va, vb, tau).item();
}

inline ad::Var total_loss(const ad::Var& lkp, const ad::Var& ltt, const ad::Var& lvt, const LossConfig& cfg) {
  return ad::weighted_sum({lkp, ltt, lvt}, {cfg.lambda1, cfg.lambda2, cfg.lambda3});
}

inline double total_loss(double lkp, double ltt, double lvt, const LossConfig& cfg) {
  return cfg.lambda1 * lkp + cfg.lambda2 * ltt + cfg.lambda3 * lvt;
}

}  // namespace openkd::objective
