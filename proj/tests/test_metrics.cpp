#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "tripath/metrics.hpp"

using namespace tripath;

namespace {

ConfusionMatrix worked() { return ConfusionMatrix::from_rows({{50, 2, 3}, {4, 30, 1}, {0, 5, 25}}); }

// Metrics recomputed straight from the pixel arrays, without a matrix.
struct PixelOracle {
  double oa = 0;
  Score iou_nc, iou_c, rho, eta, sek, p, r, f;
};

PixelOracle pixel_oracle(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt, int n) {
  PixelOracle o;
  const std::size_t total = pred.size();
  std::size_t agree = 0, both0 = 0, either0 = 0, both_change = 0, either_change = 0, change_agree = 0;
  std::size_t pred_change = 0, gt_change = 0;
  std::vector<double> pred_cnt(n + 1, 0), gt_cnt(n + 1, 0);
  for (std::size_t i = 0; i < total; ++i) {
    const int a = pred[i], b = gt[i];
    agree += a == b;
    both0 += a == 0 && b == 0;
    either0 += a == 0 || b == 0;
    both_change += a != 0 && b != 0;
    either_change += a != 0 || b != 0;
    change_agree += a == b && a != 0;
    pred_change += a != 0;
    gt_change += b != 0;
    if (!(a == 0 && b == 0)) {
      pred_cnt[a] += 1;
      gt_cnt[b] += 1;
    }
  }
  o.oa = static_cast<double>(agree) / total;
  if (either0) o.iou_nc = static_cast<double>(both0) / either0;
  if (either_change) o.iou_c = static_cast<double>(both_change) / either_change;
  const double rest = static_cast<double>(total - both0);
  if (rest > 0) {
    o.rho = change_agree / rest;
    double chance = 0;
    for (int k = 0; k <= n; ++k) chance += pred_cnt[k] * gt_cnt[k];
    o.eta = chance / (rest * rest);
    if (*o.eta != 1.0 && o.iou_c) o.sek = std::exp(*o.iou_c - 1) * (*o.rho - *o.eta) / (1 - *o.eta);
  }
  if (pred_change) o.p = static_cast<double>(change_agree) / pred_change;
  if (gt_change) o.r = static_cast<double>(change_agree) / gt_change;
  if (o.p && o.r) o.f = (*o.p + *o.r) > 0 ? 2 * *o.p * *o.r / (*o.p + *o.r) : 0.0;
  else if ((o.p && *o.p == 0) || (o.r && *o.r == 0)) o.f = 0.0;
  return o;
}

void expect_score(const Score& got, const Score& want, double tol, const char* what) {
  ASSERT_EQ(got.has_value(), want.has_value()) << what;
  if (want) EXPECT_NEAR(*got, *want, tol) << what;
}

}  // namespace

TEST(WorkedMatrix, ReproducesStatedValues) {
  const auto cm = worked();
  EXPECT_DOUBLE_EQ(overall_accuracy(cm), 0.8750);
  const auto m = miou(cm);
  EXPECT_NEAR(*m.iou_c, 61.0 / 70.0, 1e-15);
  EXPECT_NEAR(*m.iou_nc, 50.0 / 59.0, 1e-15);
  const auto s = sek(cm);
  EXPECT_NEAR(*s.rho, 55.0 / 70.0, 1e-15);
  EXPECT_NEAR(*s.eta, 2185.0 / 4900.0, 1e-15);
  const double want_sek = std::exp(61.0 / 70.0 - 1) * (55.0 / 70.0 - 2185.0 / 4900.0) / (1 - 2185.0 / 4900.0);
  EXPECT_NEAR(*s.sek, want_sek, 1e-14);
  EXPECT_NEAR(*s.sek, 0.5393, 5e-5);
  const auto f = f_scd(cm);
  EXPECT_NEAR(*f.p_scd, 55.0 / 65.0, 1e-15);
  EXPECT_NEAR(*f.r_scd, 55.0 / 66.0, 1e-15);
  EXPECT_NEAR(*f.f_scd, 110.0 / 131.0, 1e-14);
  EXPECT_NEAR(*f.f_scd, 0.8397, 5e-5);
}

TEST(Streaming, MatchesPixelRecount) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = std::uniform_int_distribution<int>(1, 2)(rng);
    const int h = std::uniform_int_distribution<int>(1, 16)(rng), w = std::uniform_int_distribution<int>(1, 16)(rng);
    std::uniform_int_distribution<int> cls(0, n);
    std::vector<std::uint8_t> pred(h * w), gt(h * w);
    for (auto& v : pred) v = static_cast<std::uint8_t>(cls(rng));
    for (auto& v : gt) v = static_cast<std::uint8_t>(cls(rng));

    ConfusionMatrix cm(n);
    // stream in two chunks
    const std::size_t cut = pred.size() / 2;
    cm.accumulate(std::span(pred).first(cut), std::span(gt).first(cut));
    cm.accumulate(std::span(pred).subspan(cut), std::span(gt).subspan(cut));
    for (int i = 0; i <= n; ++i)
      for (int j = 0; j <= n; ++j) {
        std::uint64_t c = 0;
        for (std::size_t k = 0; k < pred.size(); ++k) c += pred[k] == i && gt[k] == j;
        ASSERT_EQ(cm(i, j), c);
      }
    const auto o = pixel_oracle(pred, gt, n);
    EXPECT_NEAR(overall_accuracy(cm), o.oa, 1e-12);
    const auto m = miou(cm);
    expect_score(m.iou_nc, o.iou_nc, 1e-12, "IoU_nc");
    expect_score(m.iou_c, o.iou_c, 1e-12, "IoU_c");
    const auto s = sek(cm);
    expect_score(s.rho, o.rho, 1e-12, "rho");
    expect_score(s.eta, o.eta, 1e-12, "eta");
    expect_score(s.sek, o.sek, 1e-12, "SeK");
    const auto f = f_scd(cm);
    expect_score(f.p_scd, o.p, 1e-12, "P");
    expect_score(f.r_scd, o.r, 1e-12, "R");
    expect_score(f.f_scd, o.f, 1e-12, "F");
  }
}

TEST(FixedPoint, PerfectPredictionScoresOne) {
  std::mt19937_64 rng(3);
  for (int n : {2, 3, 6}) {
    std::vector<std::uint8_t> gt(256);
    std::uniform_int_distribution<int> cls(0, n);
    for (auto& v : gt) v = static_cast<std::uint8_t>(cls(rng));
    gt[0] = 0;
    gt[1] = 1;
    gt[2] = 2;
    ConfusionMatrix cm(n);
    cm.accumulate(gt, gt);
    const auto r = make_report(cm);
    EXPECT_NEAR(*r.OA, 1.0, 1e-12);
    EXPECT_NEAR(*r.mIoU, 1.0, 1e-12);
    EXPECT_NEAR(*r.SeK, 1.0, 1e-12);
    EXPECT_NEAR(*r.F_scd, 1.0, 1e-12);
  }
}

TEST(Degenerate, AllBackgroundPerfectLeavesChangeScoresUndefined) {
  std::vector<std::uint8_t> gt(16, 0);
  ConfusionMatrix cm(2);
  cm.accumulate(gt, gt);
  const auto r = make_report(cm);
  EXPECT_DOUBLE_EQ(*r.OA, 1.0);
  EXPECT_FALSE(r.IoU_c.has_value());
  EXPECT_FALSE(r.mIoU.has_value());
  EXPECT_FALSE(r.SeK.has_value());
  EXPECT_FALSE(r.F_scd.has_value());
}

TEST(Degenerate, AllBackgroundPredictionOnChangesGivesZeroF) {
  std::vector<std::uint8_t> gt{0, 1, 2, 1}, pred(4, 0);
  ConfusionMatrix cm(2);
  cm.accumulate(pred, gt);
  const auto f = f_scd(cm);
  EXPECT_FALSE(f.p_scd.has_value());
  EXPECT_DOUBLE_EQ(*f.r_scd, 0.0);
  EXPECT_DOUBLE_EQ(*f.f_scd, 0.0);
}

TEST(Degenerate, EmptyMatrix) {
  ConfusionMatrix cm(2);
  EXPECT_THROW(overall_accuracy(cm), EmptyMatrix);
  EXPECT_FALSE(make_report(cm).OA.has_value());
}

TEST(Accumulate, RejectsBadInput) {
  ConfusionMatrix cm(2);
  std::vector<std::uint8_t> a{0, 1}, b{0, 3}, c{0};
  EXPECT_THROW(cm.accumulate(a, b), LabelOutOfRange);
  EXPECT_THROW(cm.accumulate(a, c), ShapeMismatch);
  EXPECT_EQ(cm.total(), 0u);
  EXPECT_THROW(ConfusionMatrix(0), InvalidArg);
}

TEST(Accumulate, MergeEqualsWhole) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> cls(0, 3);
  std::vector<std::uint8_t> p(100), g(100);
  for (auto& v : p) v = static_cast<std::uint8_t>(cls(rng));
  for (auto& v : g) v = static_cast<std::uint8_t>(cls(rng));
  ConfusionMatrix whole(3), a(3), b(3);
  whole.accumulate(p, g);
  a.accumulate(std::span(p).first(37), std::span(g).first(37));
  b.accumulate(std::span(p).subspan(37), std::span(g).subspan(37));
  EXPECT_EQ(a + b, whole);
}

TEST(Properties, ScaleInvariance) {
  const auto cm = worked();
  auto big = cm;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) big.at(i, j) *= 7;
  const auto r1 = make_report(cm), r7 = make_report(big);
  EXPECT_NEAR(*r1.OA, *r7.OA, 1e-15);
  EXPECT_NEAR(*r1.mIoU, *r7.mIoU, 1e-15);
  EXPECT_NEAR(*r1.SeK, *r7.SeK, 1e-14);
  EXPECT_NEAR(*r1.F_scd, *r7.F_scd, 1e-15);
}

TEST(Properties, SekIgnoresNoChangeAgreement) {
  auto a = worked(), b = worked();
  b.at(0, 0) = 5000;
  EXPECT_NEAR(*sek(a).rho, *sek(b).rho, 1e-15);
  EXPECT_NEAR(*sek(a).eta, *sek(b).eta, 1e-15);
  EXPECT_NEAR(*f_scd(a).f_scd, *f_scd(b).f_scd, 1e-15);
}

TEST(Report, JsonCarriesNullForUndefined) {
  std::vector<std::uint8_t> gt(4, 0);
  ConfusionMatrix cm(1);
  cm.accumulate(gt, gt);
  const auto j = to_json(make_report(cm, {"built"}));
  EXPECT_TRUE(j["SeK"].is_null());
  EXPECT_DOUBLE_EQ(j["OA"].get<double>(), 1.0);
  EXPECT_EQ(j["confusion_matrix"][0][0].get<int>(), 4);
  EXPECT_EQ(j["class_names"][0], "built");
  EXPECT_FALSE(score_from_json(j["mIoU"]).has_value());
}

TEST(Report, PerClassIou) {
  const auto iou = per_class_iou(worked());
  EXPECT_NEAR(*iou[1], 30.0 / (35 + 37 - 30), 1e-15);
  EXPECT_NEAR(*iou[2], 25.0 / (30 + 29 - 25), 1e-15);
}
