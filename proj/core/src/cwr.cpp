#include "binreplay/cwr.hpp"

#include <cmath>

#include "binreplay/autograd.hpp"

namespace binreplay {

CwrHead::CwrHead(int64_t feature_dim, int64_t max_classes)
    : features_(feature_dim), classes_(max_classes) {
  if (feature_dim < 1 || max_classes < 1) throw ValidationError("head dimensions must be >= 1");
  cw_ = Tensor(Shape{max_classes, feature_dim + 1});
  tw_ = cw_;
  past_.assign(max_classes, 0);
  cur_.assign(max_classes, 0);
  active_.assign(max_classes, false);
}

void CwrHead::begin_experience(const std::vector<int>& classes_present) {
  if (classes_present.empty()) throw ValidationError("begin_experience: no classes present");
  std::fill(tw_.data.begin(), tw_.data.end(), 0.0);
  std::fill(cur_.begin(), cur_.end(), 0);
  std::fill(active_.begin(), active_.end(), false);
  const int64_t row = features_ + 1;
  for (int c : classes_present) {
    if (c < 0 || c >= classes_) throw ValidationError("class id " + std::to_string(c) + " out of range");
    active_[c] = true;
    if (past_[c] > 0) std::copy_n(cw_.data.begin() + c * row, row, tw_.data.begin() + c * row);
  }
}

void CwrHead::check_features(const Tensor& f) const {
  if (f.shape.rank() != 2 || f.shape[1] != features_)
    throw ValidationError("head expects (batch, " + std::to_string(features_) + ") features, got " + f.shape.str());
}

namespace {

Tensor affine(const Tensor& w, const Tensor& f, int64_t k, int64_t d) {
  const int64_t b = f.shape[0];
  Tensor out(Shape{b, k});
  for (int64_t i = 0; i < b; ++i) {
    const double* x = f.data.data() + i * d;
    for (int64_t c = 0; c < k; ++c) {
      const double* wr = w.data.data() + c * (d + 1);
      double acc = wr[d];
      for (int64_t j = 0; j < d; ++j) acc += wr[j] * x[j];
      out[i * k + c] = acc;
    }
  }
  return out;
}

}  // namespace

Tensor CwrHead::train_logits(const Tensor& features) const {
  check_features(features);
  return affine(tw_, features, classes_, features_);
}

Tensor CwrHead::predict(const Tensor& features) const {
  check_features(features);
  return affine(cw_, features, classes_, features_);
}

Tensor CwrHead::feature_grad(const Tensor& grad_logits) const {
  const int64_t b = grad_logits.shape[0];
  Tensor g(Shape{b, features_});
  for (int64_t i = 0; i < b; ++i)
    for (int64_t c = 0; c < classes_; ++c) {
      const double s = grad_logits[i * classes_ + c];
      if (s == 0.0) continue;
      const double* wr = tw_.data.data() + c * (features_ + 1);
      for (int64_t j = 0; j < features_; ++j) g[i * features_ + j] += s * wr[j];
    }
  return g;
}

void CwrHead::train_step(const Tensor& features, const Tensor& grad_logits, double lr) {
  check_features(features);
  const int64_t b = features.shape[0];
  const int64_t row = features_ + 1;
  for (int64_t c = 0; c < classes_; ++c) {
    if (!active_[c]) continue;
    double* wr = tw_.data.data() + c * row;
    for (int64_t i = 0; i < b; ++i) {
      const double s = grad_logits[i * classes_ + c];
      if (s == 0.0) continue;
      const double* x = features.data.data() + i * features_;
      for (int64_t j = 0; j < features_; ++j) wr[j] -= lr * s * x[j];
      wr[features_] -= lr * s;
    }
  }
}

void CwrHead::add_count(int cls, int64_t n) {
  if (cls < 0 || cls >= classes_) throw ValidationError("class id " + std::to_string(cls) + " out of range");
  if (!active_[cls]) throw ValidationError("class " + std::to_string(cls) + " is not part of this experience");
  cur_[cls] += n;
}

void CwrHead::consolidate() {
  const int64_t row = features_ + 1;
  std::vector<double> mean(row, 0.0);
  int64_t trained = 0;
  for (int64_t c = 0; c < classes_; ++c) {
    if (!active_[c]) continue;
    if (cur_[c] == 0) throw ValidationError("class " + std::to_string(c) + " trained with zero samples");
    ++trained;
    for (int64_t j = 0; j < row; ++j) mean[j] += tw_[c * row + j];
  }
  if (trained == 0) throw ValidationError("consolidate: no experience was trained");
  for (auto& m : mean) m /= static_cast<double>(trained);
  for (int64_t c = 0; c < classes_; ++c) {
    if (!active_[c]) continue;
    const double w_past = past_[c] == 0 ? 0.0 : std::sqrt(static_cast<double>(past_[c]) / cur_[c]);
    for (int64_t j = 0; j < row; ++j) {
      double& v = cw_[c * row + j];
      v = (v * w_past + (tw_[c * row + j] - mean[j])) / (w_past + 1.0);
    }
    past_[c] += cur_[c];
  }
  // cw is persisted as f32
  snap_f32(cw_.data);
}

void CwrHead::write(ByteWriter& w) const {
  write_tensor(w, cw_.cast<float>());
  w.u32(static_cast<uint32_t>(classes_));
  for (auto p : past_) w.u64(static_cast<uint64_t>(p));
}

CwrHead CwrHead::read(ByteReader& r) {
  const Tensor cw = read_float_tensor(r).cast<double>();
  if (cw.shape.rank() != 2 || cw.shape[1] < 2) throw FormatError("head weights must be (classes, features + 1)");
  CwrHead h(cw.shape[1] - 1, cw.shape[0]);
  h.cw_ = cw;
  if (r.u32() != static_cast<uint32_t>(h.classes_)) throw FormatError("head class count mismatch");
  for (auto& p : h.past_) {
    p = static_cast<int64_t>(r.u64());
    if (p < 0) throw FormatError("negative past count");
  }
  return h;
}

std::vector<int> argmax_rows(const Tensor& logits) {
  const int64_t b = logits.shape[0], k = logits.shape[1];
  std::vector<int> out(static_cast<size_t>(b));
  for (int64_t i = 0; i < b; ++i) {
    int best = 0;
    for (int64_t c = 1; c < k; ++c)
      if (logits[i * k + c] > logits[i * k + best]) best = static_cast<int>(c);
    out[i] = best;
  }
  return out;
}

}  // namespace binreplay
