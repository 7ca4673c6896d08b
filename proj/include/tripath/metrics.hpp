#pragma once

// Multi-class change detection metrics on a streaming confusion matrix.
//
// q(i, j) counts pixels predicted as class i whose ground truth is class j;
// class 0 is "no change". Degenerate ratios (zero denominators) are reported
// as std::nullopt ("undefined"), never as a fabricated 0 or 1.
//
// IoU_nc uses the union form q00 / (row0 + col0 - q00). SeK zeroes only q00
// when forming the change-only matrix.

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tripath/error.hpp"

namespace tripath {

using Score = std::optional<double>;

class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  // num_change_classes = N; the matrix is (N+1) x (N+1).
  explicit ConfusionMatrix(int num_change_classes)
      : n_(num_change_classes), q_(static_cast<std::size_t>(size() * size()), 0) {
    if (num_change_classes < 1) throw InvalidArg("num_classes", "must be at least 1");
  }

  int num_change_classes() const { return n_; }
  int size() const { return n_ + 1; }

  std::uint64_t operator()(int pred, int gt) const { return q_[index(pred, gt)]; }
  std::uint64_t& at(int pred, int gt) { return q_[index(pred, gt)]; }

  void accumulate(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
    if (pred.size() != gt.size())
      throw ShapeMismatch("pred/gt", std::to_string(pred.size()) + " vs " + std::to_string(gt.size()) + " pixels");
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (pred[i] > n_ || gt[i] > n_)
        throw LabelOutOfRange("pixel " + std::to_string(i), "label above " + std::to_string(n_));
    }
    for (std::size_t i = 0; i < pred.size(); ++i) ++q_[index(pred[i], gt[i])];
  }

  ConfusionMatrix& operator+=(const ConfusionMatrix& other) {
    if (other.n_ != n_) throw ShapeMismatch("confusion matrix", "class counts differ");
    for (std::size_t i = 0; i < q_.size(); ++i) q_[i] += other.q_[i];
    return *this;
  }

  friend ConfusionMatrix operator+(ConfusionMatrix a, const ConfusionMatrix& b) { return a += b; }
  bool operator==(const ConfusionMatrix& o) const { return n_ == o.n_ && q_ == o.q_; }

  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (auto v : q_) s += v;
    return s;
  }
  std::uint64_t row_sum(int i) const {
    std::uint64_t s = 0;
    for (int j = 0; j < size(); ++j) s += (*this)(i, j);
    return s;
  }
  std::uint64_t col_sum(int j) const {
    std::uint64_t s = 0;
    for (int i = 0; i < size(); ++i) s += (*this)(i, j);
    return s;
  }

  const std::vector<std::uint64_t>& counts() const { return q_; }

  static ConfusionMatrix from_rows(const std::vector<std::vector<std::uint64_t>>& rows) {
    ConfusionMatrix cm(static_cast<int>(rows.size()) - 1);
    for (int i = 0; i < cm.size(); ++i) {
      if (static_cast<int>(rows[static_cast<std::size_t>(i)].size()) != cm.size())
        throw ShapeMismatch("rows", "matrix must be square");
      for (int j = 0; j < cm.size(); ++j) cm.at(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    }
    return cm;
  }

 private:
  std::size_t index(int pred, int gt) const {
    return static_cast<std::size_t>(pred) * static_cast<std::size_t>(size()) + static_cast<std::size_t>(gt);
  }

  int n_ = 0;
  std::vector<std::uint64_t> q_;
};

inline Score ratio(double num, double den) {
  if (den == 0.0) return std::nullopt;
  return num / den;
}

inline double overall_accuracy(const ConfusionMatrix& cm) {
  const std::uint64_t total = cm.total();
  if (total == 0) throw EmptyMatrix("confusion matrix");
  std::uint64_t diag = 0;
  for (int i = 0; i < cm.size(); ++i) diag += cm(i, i);
  return static_cast<double>(diag) / static_cast<double>(total);
}

struct MiouResult {
  Score miou, iou_nc, iou_c;
};

inline MiouResult miou(const ConfusionMatrix& cm) {
  const double q00 = static_cast<double>(cm(0, 0));
  const double total = static_cast<double>(cm.total());
  MiouResult r;
  r.iou_nc = ratio(q00, static_cast<double>(cm.row_sum(0)) + static_cast<double>(cm.col_sum(0)) - q00);
  std::uint64_t changed = 0;
  for (int i = 1; i < cm.size(); ++i)
    for (int j = 1; j < cm.size(); ++j) changed += cm(i, j);
  r.iou_c = ratio(static_cast<double>(changed), total - q00);
  if (r.iou_nc && r.iou_c) r.miou = (*r.iou_nc + *r.iou_c) / 2.0;
  return r;
}

struct SekResult {
  Score sek, rho, eta;
};

inline SekResult sek(const ConfusionMatrix& cm) {
  const int k = cm.size();
  auto qh = [&](int i, int j) { return (i == 0 && j == 0) ? 0.0 : static_cast<double>(cm(i, j)); };
  double sum = 0, diag = 0;
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) sum += qh(i, j);
  for (int i = 1; i < k; ++i) diag += qh(i, i);
  SekResult r;
  if (sum == 0) return r;
  double chance = 0;
  for (int i = 0; i < k; ++i) {
    double row = 0, col = 0;
    for (int j = 0; j < k; ++j) {
      row += qh(i, j);
      col += qh(j, i);
    }
    chance += row * col;
  }
  r.rho = diag / sum;
  r.eta = chance / (sum * sum);
  const Score iou_c = miou(cm).iou_c;
  if (*r.eta == 1.0 || !iou_c) return r;
  r.sek = std::exp(*iou_c - 1.0) * (*r.rho - *r.eta) / (1.0 - *r.eta);
  return r;
}

struct FscdResult {
  Score f_scd, p_scd, r_scd;
};

inline FscdResult f_scd(const ConfusionMatrix& cm) {
  double tp = 0, pred_change = 0, gt_change = 0;
  for (int i = 1; i < cm.size(); ++i) {
    tp += static_cast<double>(cm(i, i));
    pred_change += static_cast<double>(cm.row_sum(i));
    gt_change += static_cast<double>(cm.col_sum(i));
  }
  FscdResult r;
  r.p_scd = ratio(tp, pred_change);
  r.r_scd = ratio(tp, gt_change);
  if (r.p_scd && r.r_scd) {
    const double s = *r.p_scd + *r.r_scd;
    r.f_scd = s > 0 ? 2.0 * *r.p_scd * *r.r_scd / s : 0.0;
  } else if ((r.p_scd && *r.p_scd == 0.0) || (r.r_scd && *r.r_scd == 0.0)) {
    r.f_scd = 0.0;  // harmonic mean with a zero term
  }
  return r;
}

// Standard per-class IoU q_ii / (row_i + col_i - q_ii).
inline std::vector<Score> per_class_iou(const ConfusionMatrix& cm) {
  std::vector<Score> out;
  for (int i = 0; i < cm.size(); ++i) {
    const double d = static_cast<double>(cm(i, i));
    out.push_back(ratio(d, static_cast<double>(cm.row_sum(i)) + static_cast<double>(cm.col_sum(i)) - d));
  }
  return out;
}

struct MetricsReport {
  Score OA, mIoU, IoU_nc, IoU_c, SeK, rho, eta, P_scd, R_scd, F_scd;
  std::vector<Score> per_class_iou;
  ConfusionMatrix matrix;
  std::vector<std::string> class_names;
};

inline MetricsReport make_report(const ConfusionMatrix& cm, std::vector<std::string> class_names = {}) {
  MetricsReport r;
  if (cm.total() > 0) r.OA = overall_accuracy(cm);
  const auto m = miou(cm);
  const auto s = sek(cm);
  const auto f = f_scd(cm);
  r.mIoU = m.miou;
  r.IoU_nc = m.iou_nc;
  r.IoU_c = m.iou_c;
  r.SeK = s.sek;
  r.rho = s.rho;
  r.eta = s.eta;
  r.P_scd = f.p_scd;
  r.R_scd = f.r_scd;
  r.F_scd = f.f_scd;
  r.per_class_iou = per_class_iou(cm);
  r.matrix = cm;
  r.class_names = std::move(class_names);
  return r;
}

inline nlohmann::json score_json(const Score& s) { return s ? nlohmann::json(*s) : nlohmann::json(nullptr); }

inline Score score_from_json(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<double>();
}

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["OA"] = score_json(r.OA);
  j["mIoU"] = score_json(r.mIoU);
  j["IoU_nc"] = score_json(r.IoU_nc);
  j["IoU_c"] = score_json(r.IoU_c);
  j["SeK"] = score_json(r.SeK);
  j["rho"] = score_json(r.rho);
  j["eta"] = score_json(r.eta);
  j["P_scd"] = score_json(r.P_scd);
  j["R_scd"] = score_json(r.R_scd);
  j["F_scd"] = score_json(r.F_scd);
  j["per_class_iou"] = nlohmann::json::array();
  for (const auto& s : r.per_class_iou) j["per_class_iou"].push_back(score_json(s));
  nlohmann::json rows = nlohmann::json::array();
  for (int i = 0; i < r.matrix.size(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (int k = 0; k < r.matrix.size(); ++k) row.push_back(r.matrix(i, k));
    rows.push_back(row);
  }
  j["confusion_matrix"] = rows;
  j["num_classes"] = r.matrix.num_change_classes();
  j["class_names"] = r.class_names;
  return j;
}

}  // namespace tripath
