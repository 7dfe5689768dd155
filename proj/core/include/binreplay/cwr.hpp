#pragma once

#include <cstdint>
#include <vector>

#include "binreplay/io.hpp"
#include "binreplay/tensor.hpp"

namespace binreplay {

/// Classification head with consolidated weights (cw, used for inference) and
/// temporary weights (tw, trained during one experience). Both are
/// (classes, features + 1); the last column is the bias.
class CwrHead {
 public:
  CwrHead() = default;
  CwrHead(int64_t feature_dim, int64_t max_classes);

  [[nodiscard]] int64_t feature_dim() const { return features_; }
  [[nodiscard]] int64_t num_classes() const { return classes_; }

  /// Resets tw, reloads cw rows of already seen classes among
  /// `classes_present`, and clears the current counts.
  void begin_experience(const std::vector<int>& classes_present);

  /// Mask of the classes taking part in the current experience.
  [[nodiscard]] const std::vector<bool>& active() const { return active_; }

  /// tw logits for (B, F) features.
  [[nodiscard]] Tensor train_logits(const Tensor& features) const;
  /// d loss / d features for the given logit gradient, through tw.
  [[nodiscard]] Tensor feature_grad(const Tensor& grad_logits) const;
  /// Plain SGD on the tw rows of active classes.
  void train_step(const Tensor& features, const Tensor& grad_logits, double lr);

  void add_count(int cls, int64_t n);

  /// Folds tw into cw for the classes of this experience, weighted by
  /// sqrt(past / current) sample counts.
  void consolidate();

  /// cw logits for (B, F) features; reads nothing else.
  [[nodiscard]] Tensor predict(const Tensor& features) const;

  [[nodiscard]] const Tensor& cw() const { return cw_; }
  [[nodiscard]] const Tensor& tw() const { return tw_; }
  Tensor& mutable_tw() { return tw_; }
  [[nodiscard]] const std::vector<int64_t>& past_counts() const { return past_; }
  [[nodiscard]] const std::vector<int64_t>& cur_counts() const { return cur_; }
  [[nodiscard]] bool seen(int cls) const { return past_.at(cls) > 0; }

  /// cw and past counts only; tw is transient.
  void write(ByteWriter& w) const;
  static CwrHead read(ByteReader& r);

 private:
  void check_features(const Tensor& f) const;
  int64_t features_ = 0;
  int64_t classes_ = 0;
  Tensor cw_;
  Tensor tw_;
  std::vector<int64_t> past_;
  std::vector<int64_t> cur_;
  std::vector<bool> active_;
};

/// Index of the largest logit per row; ties go to the lowest class id.
std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace binreplay
