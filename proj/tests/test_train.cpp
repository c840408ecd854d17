#include <catch2/catch_amalgamated.hpp>

#include <rct/augment.hpp>
#include <rct/features.hpp>
#include <rct/rng.hpp>
#include <rct/train.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace aug = rct::aug;
namespace feat = rct::features;
namespace train = rct::train;
using rct::Mat;
using rct::Rng;
using rct::Vec;
using train::PredGrad;
using train::SampleLabels;
using Preds = rct::model::Predictions<double>;

namespace {

Preds random_preds(Rng& rng, int t_out, int C, double lo = 0.1, double hi = 0.9) {
  Preds p;
  p.weak = Vec::NullaryExpr(C, [&]() { return rng.uniform(lo, hi); });
  p.strong = Mat::NullaryExpr(t_out, C, [&]() { return rng.uniform(lo, hi); });
  return p;
}

feat::MelClip random_clip(Rng& rng, int rows, int cols) {
  Mat raw(rows, cols);
  for (Eigen::Index i = 0; i < raw.size(); ++i) raw.data()[i] = rng.uniform(-5.0, 5.0);
  return feat::normalize_logmel(raw);
}

train::TrainSample random_sample(Rng& rng, train::SampleKind kind, int t_out, int C,
                                 int cols = 6) {
  train::TrainSample s;
  s.clip = random_clip(rng, t_out * aug::kPoolFactor, cols);
  s.kind = kind;
  if (kind != train::SampleKind::kUnlabeled) {
    s.weak = Vec::NullaryExpr(C, [&]() { return rng.uniform() < 0.5 ? 0.0 : 1.0; });
  }
  if (kind == train::SampleKind::kStrong) {
    s.strong = Mat::NullaryExpr(t_out, C, [&]() { return rng.uniform() < 0.5 ? 0.0 : 1.0; });
    s.weak = s.strong.colwise().maxCoeff().transpose();
  }
  return s;
}

// independent per-element BCE with the same clamp
double bce_ref(double p, double y) {
  p = std::clamp(p, 1e-7, 1.0 - 1e-7);
  return -(y * std::log(p) + (1.0 - y) * std::log1p(-p));
}

bool tensors_equal(const rct::model::Tensors<float>& a, const rct::model::Tensors<float>& b) {
  if (!a.same_shape(b)) return false;
  auto ia = a.begin();
  auto ib = b.begin();
  for (; ia != a.end(); ++ia, ++ib) {
    if (ia->second != ib->second) return false;
  }
  return true;
}

train::TrainData tiny_dataset(std::uint64_t seed, int n_strong, int n_weak, int n_unlabeled,
                              int n_val, int t_out = 4, int C = 2) {
  Rng rng(seed);
  train::TrainData data;
  data.n_classes = C;
  for (int i = 0; i < n_strong; ++i) {
    data.strong.push_back(random_sample(rng, train::SampleKind::kStrong, t_out, C, feat::kNumMels));
  }
  for (int i = 0; i < n_weak; ++i) {
    data.weak.push_back(random_sample(rng, train::SampleKind::kWeak, t_out, C, feat::kNumMels));
  }
  for (int i = 0; i < n_unlabeled; ++i) {
    data.unlabeled.push_back(
        random_sample(rng, train::SampleKind::kUnlabeled, t_out, C, feat::kNumMels));
  }
  for (int i = 0; i < n_val; ++i) {
    data.val.push_back(random_sample(rng, train::SampleKind::kStrong, t_out, C, feat::kNumMels));
  }
  return data;
}

train::TrainConfig tiny_config() {
  train::TrainConfig cfg;
  cfg.batch_strong = 2;
  cfg.batch_weak = 2;
  cfg.batch_unlabeled = 2;
  cfg.epochs = 2;
  cfg.warmup_epochs = 1;
  cfg.channels = {2, 2, 2};
  cfg.gru_hidden = 2;
  cfg.gru_layers = 1;
  cfg.ema_decay = 0.9;
  cfg.d_max = 2;
  return cfg;
}

}  // namespace

// ---------------------------------------------------------------------------
// Schedules

TEST_CASE("warmup ramp hits its anchor points", "[train][sched]") {
  REQUIRE(train::ramp(0, 100, 2.0) == 0.0);
  REQUIRE(train::ramp(50, 100, 2.0) == 1.0);
  REQUIRE(train::ramp(100, 100, 2.0) == 2.0);
  REQUIRE(train::ramp(250, 100, 2.0) == 2.0);
  REQUIRE(train::ramp(7, 0, 3.5) == 3.5);  // no warmup -> constant
  REQUIRE_THROWS_AS(train::ramp(-1, 100, 2.0), rct::DomainError);

  REQUIRE(train::lr_schedule(0, 100, 1e-3) == 0.0);
  REQUIRE(train::lr_schedule(50, 100, 1e-3) == 5e-4);
  REQUIRE(train::lr_schedule(100, 100, 1e-3) == 1e-3);
  REQUIRE(train::lr_schedule(1000, 100, 1e-3) == 1e-3);
}

TEST_CASE("warmup ramp is non-decreasing and clamps at the maximum", "[train][sched]") {
  double prev = -1.0;
  for (std::int64_t s = 0; s <= 200; ++s) {
    const double r = train::ramp(s, 100, 2.0);
    REQUIRE(r >= prev);
    REQUIRE(r <= 2.0);
    if (s >= 100) REQUIRE(r == 2.0);
    prev = r;
  }
}

// ---------------------------------------------------------------------------
// Adam

TEST_CASE("adam leaves parameters unchanged on zero gradients", "[train][adam]") {
  rct::model::Tensors<double> params;
  params.add("a", 3, 2);
  params.add("b", 1, 4);
  Rng rng(3);
  for (auto& [name, m] : params) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-1.0, 1.0);
  }
  rct::model::Tensors<double> before = params;
  rct::model::Tensors<double> grads = params;
  grads.set_zero();
  auto st = train::make_adam_state(params);
  for (int k = 0; k < 3; ++k) train::adam_step(params, grads, st, 0.1, 0.9, 0.999, 1e-8);
  auto ip = params.begin();
  auto ib = before.begin();
  for (; ip != params.end(); ++ip, ++ib) REQUIRE(ip->second == ib->second);
  REQUIRE(st.t == 3);
}

TEST_CASE("adam first step on a unit gradient moves by the bias-corrected learning rate",
          "[train][adam]") {
  rct::model::Tensors<double> params;
  params.add("x", 1, 1);
  params.at("x")(0, 0) = 1.0;
  rct::model::Tensors<double> grads = params;
  grads.at("x")(0, 0) = 1.0;
  auto st = train::make_adam_state(params);
  const double lr = 0.01, eps = 1e-8;
  train::adam_step(params, grads, st, lr, 0.9, 0.999, eps);
  // m_hat = 1, v_hat = 1 after bias correction, so the step is -lr/(1+eps)
  REQUIRE(std::abs(params.at("x")(0, 0) - (1.0 - lr / (1.0 + eps))) < 1e-15);
}

TEST_CASE("adam matches an independent scalar run on a quadratic", "[train][adam]") {
  const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  // reference scalar implementation, written out longhand
  double xr = 1.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 100; ++t) {
    const double g = 2.0 * xr;
    m = b1 * m + (1.0 - b1) * g;
    v = b2 * v + (1.0 - b2) * g * g;
    const double mh = m / (1.0 - std::pow(b1, t));
    const double vh = v / (1.0 - std::pow(b2, t));
    xr -= lr * mh / (std::sqrt(vh) + eps);
  }

  rct::model::Tensors<double> params;
  params.add("x", 1, 1);
  params.at("x")(0, 0) = 1.0;
  auto st = train::make_adam_state(params);
  rct::model::Tensors<double> grads = params;
  for (int t = 1; t <= 100; ++t) {
    grads.at("x")(0, 0) = 2.0 * params.at("x")(0, 0);
    train::adam_step(params, grads, st, lr, b1, b2, eps);
  }
  REQUIRE(std::abs(params.at("x")(0, 0)) < 0.1);
  REQUIRE(std::abs(params.at("x")(0, 0) - xr) < 1e-12);
}

TEST_CASE("adam rejects shape mismatches and non-finite gradients", "[train][adam]") {
  rct::model::Tensors<double> params;
  params.add("w", 2, 2);
  auto st = train::make_adam_state(params);
  rct::model::Tensors<double> bad;
  bad.add("w", 3, 2);
  REQUIRE_THROWS_AS(train::adam_step(params, bad, st, 0.1, 0.9, 0.999, 1e-8), rct::ShapeError);
  rct::model::Tensors<double> nan_grads = params;
  nan_grads.set_zero();
  nan_grads.at("w")(1, 1) = std::numeric_limits<double>::quiet_NaN();
  REQUIRE_THROWS_WITH(train::adam_step(params, nan_grads, st, 0.1, 0.9, 0.999, 1e-8),
                      Catch::Matchers::ContainsSubstring("w"));
}

// ---------------------------------------------------------------------------
// Supervised loss

TEST_CASE("supervised loss is tiny on perfect predictions", "[train][loss]") {
  const int C = 3, T = 4;
  Preds p;
  SampleLabels<double> lab;
  lab.has_weak = lab.has_strong = true;
  lab.weak = Vec(C);
  lab.weak << 1, 0, 1;
  lab.strong = Mat::NullaryExpr(T, C, [](Eigen::Index i, Eigen::Index j) {
    return (i + j) % 2 == 0 ? 1.0 : 0.0;
  });
  p.weak = lab.weak;
  p.strong = lab.strong;
  PredGrad<double> g;
  g.init(T, C);
  const double loss = train::supervised_loss<double>({&p}, {&lab}, {&g});
  REQUIRE(loss >= 0.0);
  REQUIRE(loss < 1e-5);
  // saturated predictions sit in the clamp zone, so they carry no gradient
  REQUIRE(g.d_weak.cwiseAbs().maxCoeff() == 0.0);
  REQUIRE(g.d_strong.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("supervised loss at one half is ln 2 for any binary labels", "[train][loss]") {
  Rng rng(11);
  const int C = 4, T = 3;
  Preds p;
  p.weak = Vec::Constant(C, 0.5);
  p.strong = Mat::Constant(T, C, 0.5);
  SampleLabels<double> lab;
  lab.has_weak = lab.has_strong = true;
  lab.weak = Vec::NullaryExpr(C, [&]() { return rng.uniform() < 0.5 ? 0.0 : 1.0; });
  lab.strong = Mat::NullaryExpr(T, C, [&]() { return rng.uniform() < 0.5 ? 0.0 : 1.0; });
  const double loss = train::supervised_loss<double>({&p}, {&lab});
  REQUIRE(std::abs(loss - std::log(2.0)) < 1e-12);
}

TEST_CASE("supervised loss ignores unlabelled samples", "[train][loss]") {
  Rng rng(12);
  Preds p = random_preds(rng, 3, 2);
  SampleLabels<double> none;  // neither weak nor strong
  REQUIRE(train::supervised_loss<double>({&p}, {&none}) == 0.0);
  REQUIRE(train::supervised_loss<double>({}, {}) == 0.0);
}

TEST_CASE("supervised loss rejects bad labels and shapes", "[train][loss]") {
  Rng rng(13);
  Preds p = random_preds(rng, 2, 2);
  SampleLabels<double> lab;
  lab.has_weak = true;
  lab.weak = Vec::Constant(2, 1.5);
  REQUIRE_THROWS_AS(train::supervised_loss<double>({&p}, {&lab}), rct::DomainError);
  lab.weak = Vec::Constant(3, 1.0);  // wrong C
  REQUIRE_THROWS_AS(train::supervised_loss<double>({&p}, {&lab}), rct::ShapeError);
}

TEST_CASE("supervised loss pools one global mean over samples and levels", "[train][loss]") {
  Rng rng(14);
  const int C = 3, T = 4;
  Preds weak_only = random_preds(rng, T, C);
  Preds strong_full = random_preds(rng, T, C);
  SampleLabels<double> la, lb;
  la.has_weak = true;
  la.weak = Vec::NullaryExpr(C, [&]() { return rng.uniform() < 0.5 ? 0.0 : 1.0; });
  lb.has_weak = lb.has_strong = true;
  lb.strong = Mat::NullaryExpr(T, C, [&]() { return rng.uniform() < 0.5 ? 0.0 : 1.0; });
  lb.weak = lb.strong.colwise().maxCoeff().transpose();

  double sum = 0.0;
  int count = 0;
  for (int c = 0; c < C; ++c, ++count) sum += bce_ref(weak_only.weak[c], la.weak[c]);
  for (int c = 0; c < C; ++c, ++count) sum += bce_ref(strong_full.weak[c], lb.weak[c]);
  for (int t = 0; t < T; ++t) {
    for (int c = 0; c < C; ++c, ++count) sum += bce_ref(strong_full.strong(t, c), lb.strong(t, c));
  }
  const double want = sum / count;
  const double got = train::supervised_loss<double>({&weak_only, &strong_full}, {&la, &lb});
  REQUIRE(std::abs(got - want) < 1e-9);
}

TEST_CASE("supervised loss gradient matches finite differences", "[train][loss][grad]") {
  Rng rng(15);
  const int C = 2, T = 3;
  Preds p = random_preds(rng, T, C, 0.05, 0.95);
  SampleLabels<double> lab;
  lab.has_weak = lab.has_strong = true;
  lab.weak = Vec::NullaryExpr(C, [&]() { return rng.uniform() < 0.5 ? 0.0 : 1.0; });
  lab.strong = Mat::NullaryExpr(T, C, [&]() { return rng.uniform() < 0.5 ? 0.0 : 1.0; });

  PredGrad<double> g;
  g.init(T, C);
  train::supervised_loss<double>({&p}, {&lab}, {&g});

  const double h = 1e-6;
  auto fd = [&](double* slot) {
    const double saved = *slot;
    *slot = saved + h;
    const double up = train::supervised_loss<double>({&p}, {&lab});
    *slot = saved - h;
    const double dn = train::supervised_loss<double>({&p}, {&lab});
    *slot = saved;
    return (up - dn) / (2.0 * h);
  };
  for (int c = 0; c < C; ++c) REQUIRE(std::abs(fd(&p.weak[c]) - g.d_weak[c]) < 1e-5);
  for (Eigen::Index i = 0; i < p.strong.size(); ++i) {
    REQUIRE(std::abs(fd(p.strong.data() + i) - g.d_strong.data()[i]) < 1e-5);
  }
}

// ---------------------------------------------------------------------------
// Teacher MSE

TEST_CASE("teacher mse vanishes when the student matches the teacher", "[train][loss]") {
  Rng rng(21);
  Preds s = random_preds(rng, 3, 2);
  Preds t = s;
  REQUIRE(train::meanteacher_loss<double>({{&s}}, {{&t}}, {true}, 1.5) == 0.0);
}

TEST_CASE("teacher mse is zero without weight or unlabelled samples", "[train][loss]") {
  Rng rng(22);
  Preds s = random_preds(rng, 3, 2);
  Preds t = random_preds(rng, 3, 2);
  REQUIRE(train::meanteacher_loss<double>({{&s}}, {{&t}}, {true}, 0.0) == 0.0);
  REQUIRE(train::meanteacher_loss<double>({{&s}}, {{nullptr}}, {false}, 1.5) == 0.0);
}

TEST_CASE("teacher mse matches the hand formula on one sample", "[train][loss]") {
  const int C = 2, T = 2;
  Preds s, t;
  s.weak = Vec(C);
  s.weak << 0.2, 0.8;
  t.weak = Vec(C);
  t.weak << 0.4, 0.5;
  s.strong = Mat(T, C);
  s.strong << 0.1, 0.9, 0.3, 0.7;
  t.strong = Mat(T, C);
  t.strong << 0.2, 0.6, 0.3, 0.2;
  const double r = 1.5;
  const double wsum = (s.weak - t.weak).squaredNorm();
  const double ssum = (s.strong - t.strong).squaredNorm();
  const double want = r * (wsum / C + ssum / (C * T));
  PredGrad<double> g;
  g.init(T, C);
  std::vector<std::vector<PredGrad<double>*>> grads = {{&g}};
  const double got = train::meanteacher_loss<double>({{&s}}, {{&t}}, {true}, r, grads);
  REQUIRE(std::abs(got - want) < 1e-12);

  const double h = 1e-6;
  auto fd = [&](double* slot) {
    const double saved = *slot;
    *slot = saved + h;
    const double up = train::meanteacher_loss<double>({{&s}}, {{&t}}, {true}, r);
    *slot = saved - h;
    const double dn = train::meanteacher_loss<double>({{&s}}, {{&t}}, {true}, r);
    *slot = saved;
    return (up - dn) / (2.0 * h);
  };
  for (int c = 0; c < C; ++c) REQUIRE(std::abs(fd(&s.weak[c]) - g.d_weak[c]) < 1e-6);
  for (Eigen::Index i = 0; i < s.strong.size(); ++i) {
    REQUIRE(std::abs(fd(s.strong.data() + i) - g.d_strong.data()[i]) < 1e-6);
  }
}

TEST_CASE("teacher mse averages over branches", "[train][loss]") {
  Rng rng(23);
  Preds s1 = random_preds(rng, 3, 2), s2 = random_preds(rng, 3, 2);
  Preds t1 = random_preds(rng, 3, 2), t2 = random_preds(rng, 3, 2);
  const double one = train::meanteacher_loss<double>({{&s1}}, {{&t1}}, {true}, 1.0);
  const double two = train::meanteacher_loss<double>({{&s2}}, {{&t2}}, {true}, 1.0);
  const double both = train::meanteacher_loss<double>({{&s1}, {&s2}}, {{&t1}, {&t2}}, {true}, 1.0);
  REQUIRE(std::abs(both - 0.5 * (one + two)) < 1e-12);
}

TEST_CASE("teacher mse flags missing teachers and bad shapes", "[train][loss]") {
  Rng rng(24);
  Preds s = random_preds(rng, 3, 2);
  REQUIRE_THROWS_AS(train::meanteacher_loss<double>({{&s}}, {{nullptr}}, {true}, 1.0),
                    rct::StateError);
  Preds t = random_preds(rng, 4, 2);  // wrong T'
  REQUIRE_THROWS_AS(train::meanteacher_loss<double>({{&s}}, {{&t}}, {true}, 1.0),
                    rct::ShapeError);
}

// ---------------------------------------------------------------------------
// Self-consistency

TEST_CASE("self-consistency vanishes when branches agree", "[train][loss]") {
  Rng rng(31);
  Preds a = random_preds(rng, 4, 3);
  Preds b = a;
  train::AugDescriptor identity;
  REQUIRE(train::self_consistency_loss<double>({&a}, {&b}, identity, 2.0) == 0.0);
}

TEST_CASE("self-consistency vanishes under a commuted shift", "[train][loss]") {
  Rng rng(32);
  const int T = 6;
  Preds orig = random_preds(rng, T, 2);
  train::AugDescriptor shift;
  shift.transform.kind = aug::LabelTransform::Kind::kShift;
  shift.transform.n_out = 2;
  Preds moved = orig;
  moved.strong = aug::rotate_rows(orig.strong, 2, T);
  REQUIRE(train::self_consistency_loss<double>({&orig}, {&moved}, shift, 2.0) == 0.0);
}

TEST_CASE("self-consistency matches the scalar fixture", "[train][loss]") {
  Preds orig, augd;
  orig.weak = Vec::Constant(1, 0.3);
  augd.weak = Vec::Constant(1, 0.3);
  orig.strong = Mat(2, 1);
  orig.strong << 0.2, 0.4;
  augd.strong = Mat(2, 1);
  augd.strong << 0.4, 0.4;
  train::AugDescriptor identity;
  const double got = train::self_consistency_loss<double>({&orig}, {&augd}, identity, 2.0);
  REQUIRE(std::abs(got - 0.04) < 1e-12);
}

TEST_CASE("self-consistency gradients match finite differences", "[train][loss][grad]") {
  Rng rng(33);
  const int T = 4, C = 2;

  auto check = [&](const train::AugDescriptor& desc, std::vector<Preds>& orig,
                   std::vector<Preds>& augd) {
    std::vector<const Preds*> op, ap;
    std::vector<PredGrad<double>> og(orig.size()), ag(augd.size());
    std::vector<PredGrad<double>*> ogp, agp;
    for (std::size_t i = 0; i < orig.size(); ++i) {
      op.push_back(&orig[i]);
      og[i].init(T, C);
      ogp.push_back(&og[i]);
    }
    for (std::size_t i = 0; i < augd.size(); ++i) {
      ap.push_back(&augd[i]);
      ag[i].init(T, C);
      agp.push_back(&ag[i]);
    }
    const double r = 1.7;
    train::self_consistency_loss<double>(op, ap, desc, r, ogp, agp);
    const double h = 1e-6;
    auto fd = [&](double* slot) {
      const double saved = *slot;
      *slot = saved + h;
      const double up = train::self_consistency_loss<double>(op, ap, desc, r);
      *slot = saved - h;
      const double dn = train::self_consistency_loss<double>(op, ap, desc, r);
      *slot = saved;
      return (up - dn) / (2.0 * h);
    };
    for (std::size_t i = 0; i < orig.size(); ++i) {
      for (int c = 0; c < C; ++c) {
        REQUIRE(std::abs(fd(&orig[i].weak[c]) - og[i].d_weak[c]) < 1e-6);
      }
      for (Eigen::Index k = 0; k < orig[i].strong.size(); ++k) {
        REQUIRE(std::abs(fd(orig[i].strong.data() + k) - og[i].d_strong.data()[k]) < 1e-6);
      }
    }
    for (std::size_t i = 0; i < augd.size(); ++i) {
      for (int c = 0; c < C; ++c) {
        REQUIRE(std::abs(fd(&augd[i].weak[c]) - ag[i].d_weak[c]) < 1e-6);
      }
      for (Eigen::Index k = 0; k < augd[i].strong.size(); ++k) {
        REQUIRE(std::abs(fd(augd[i].strong.data() + k) - ag[i].d_strong.data()[k]) < 1e-6);
      }
    }
  };

  SECTION("shift transform") {
    std::vector<Preds> orig = {random_preds(rng, T, C), random_preds(rng, T, C)};
    std::vector<Preds> augd = {random_preds(rng, T, C), random_preds(rng, T, C)};
    train::AugDescriptor desc;
    desc.transform.kind = aug::LabelTransform::Kind::kShift;
    desc.transform.n_out = 3;
    check(desc, orig, augd);
  }
  SECTION("mix sets with saturated and passthrough entries") {
    // keep entries away from the 0.05/0.95 harden kinks so differences are smooth
    std::vector<Preds> orig = {random_preds(rng, T, C, 0.1, 0.9), random_preds(rng, T, C, 0.1, 0.9),
                               random_preds(rng, T, C, 0.1, 0.9)};
    orig[0].weak[0] = 0.97;         // saturates to 1
    orig[1].strong(0, 0) = 0.02;    // saturates to 0
    std::vector<Preds> augd = {random_preds(rng, T, C), random_preds(rng, T, C),
                               random_preds(rng, T, C)};
    train::AugDescriptor desc;
    desc.mix_sets = {{0, 1}, {1, 2}, {2, 0}};
    check(desc, orig, augd);
  }
}

TEST_CASE("mix self-consistency hardens and routes to the winning branch", "[train][loss]") {
  // C=1, T'=1: weak winner saturates (no gradient), strong winner passes through
  Preds p0, p1, a;
  p0.weak = Vec::Constant(1, 0.97);  // hardens to 1, wins
  p1.weak = Vec::Constant(1, 0.6);
  p0.strong = Mat::Constant(1, 1, 0.3);
  p1.strong = Mat::Constant(1, 1, 0.6);  // passthrough, wins
  a.weak = Vec::Constant(1, 0.8);
  a.strong = Mat::Constant(1, 1, 0.5);
  train::AugDescriptor desc;
  desc.mix_sets = {{0, 1}};
  PredGrad<double> g0, g1, ga;
  g0.init(1, 1);
  g1.init(1, 1);
  ga.init(1, 1);
  const double r = 1.0;
  const double got = train::self_consistency_loss<double>({&p0, &p1}, {&a}, desc, r,
                                                          {&g0, &g1}, {&ga});
  // weak: max(harden(0.97), harden(0.6)) = 1 vs 0.8; strong: max(0.3, 0.6) = 0.6 vs 0.5
  const double want = r * (1.0 - 0.8) * (1.0 - 0.8) + r * (0.6 - 0.5) * (0.6 - 0.5);
  REQUIRE(std::abs(got - want) < 1e-12);
  REQUIRE(g0.d_weak[0] == 0.0);  // winner saturated: no gradient anywhere on weak
  REQUIRE(g1.d_weak[0] == 0.0);
  REQUIRE(g0.d_strong(0, 0) == 0.0);  // loser gets nothing
  REQUIRE(std::abs(g1.d_strong(0, 0) - 2.0 * r * (0.6 - 0.5)) < 1e-12);
  REQUIRE(std::abs(ga.d_weak[0] + 2.0 * r * (1.0 - 0.8)) < 1e-12);
  REQUIRE(std::abs(ga.d_strong(0, 0) + 2.0 * r * (0.6 - 0.5)) < 1e-12);
}

TEST_CASE("mix self-consistency agrees with the label transform on values", "[train][loss]") {
  Rng rng(34);
  Preds p0 = random_preds(rng, 3, 2, 0.0, 1.0);
  Preds p1 = random_preds(rng, 3, 2, 0.0, 1.0);
  Preds a;
  a.weak = aug::mixup_label_transform<Vec>({p0.weak, p1.weak});
  a.strong = aug::mixup_label_transform<Mat>({p0.strong, p1.strong});
  train::AugDescriptor desc;
  desc.mix_sets = {{0, 1}};
  // aug side equals the hardened OR of the originals, so the loss is zero
  REQUIRE(train::self_consistency_loss<double>({&p0, &p1}, {&a}, desc, 2.0) == 0.0);
}

// ---------------------------------------------------------------------------
// Teacher-consistency (ICT form)

TEST_CASE("teacher consistency matches self-consistency values with a frozen teacher",
          "[train][loss]") {
  Rng rng(41);
  const int T = 4, C = 2;
  std::vector<Preds> orig = {random_preds(rng, T, C), random_preds(rng, T, C)};
  std::vector<Preds> augd = {random_preds(rng, T, C), random_preds(rng, T, C)};
  std::vector<const Preds*> op = {&orig[0], &orig[1]};
  std::vector<const Preds*> ap = {&augd[0], &augd[1]};

  train::AugDescriptor shift;
  shift.transform.kind = aug::LabelTransform::Kind::kShift;
  shift.transform.n_out = 1;
  const double sc = train::self_consistency_loss<double>(op, ap, shift, 1.3);
  const double ict = train::ict_consistency_loss<double>(op, ap, shift, 1.3);
  REQUIRE(std::abs(sc - ict) < 1e-15);

  train::AugDescriptor mix;
  mix.mix_sets = {{0, 1}, {1, 0}};
  const double scm = train::self_consistency_loss<double>(op, ap, mix, 1.3);
  const double ictm = train::ict_consistency_loss<double>(op, ap, mix, 1.3);
  REQUIRE(std::abs(scm - ictm) < 1e-15);
}

TEST_CASE("teacher consistency is zero at zero weight and on a commuted shift", "[train][loss]") {
  Rng rng(42);
  Preds t = random_preds(rng, 5, 2);
  Preds s = t;
  s.strong = aug::rotate_rows(t.strong, 2, 5);
  train::AugDescriptor shift;
  shift.transform.kind = aug::LabelTransform::Kind::kShift;
  shift.transform.n_out = 2;
  REQUIRE(train::ict_consistency_loss<double>({&t}, {&s}, shift, 2.0) == 0.0);
  Preds other = random_preds(rng, 5, 2);
  REQUIRE(train::ict_consistency_loss<double>({&t}, {&other}, shift, 0.0) == 0.0);
}

TEST_CASE("teacher consistency honors the include mask", "[train][loss]") {
  Rng rng(43);
  const int T = 3, C = 2;
  std::vector<Preds> t = {random_preds(rng, T, C), random_preds(rng, T, C)};
  std::vector<Preds> s = {random_preds(rng, T, C), random_preds(rng, T, C)};
  train::AugDescriptor identity;
  // only sample 1 included: normalization uses one sample, not two
  const double got = train::ict_consistency_loss<double>({&t[0], &t[1]}, {&s[0], &s[1]}, identity,
                                                         1.0, {false, true});
  const double want = (t[1].weak - s[1].weak).squaredNorm() / C +
                      (t[1].strong - s[1].strong).squaredNorm() / (C * T);
  REQUIRE(std::abs(got - want) < 1e-12);
  REQUIRE(train::ict_consistency_loss<double>({&t[0], &t[1]}, {&s[0], &s[1]}, identity, 1.0,
                                              {false, false}) == 0.0);
}

TEST_CASE("teacher consistency requires teacher predictions where included", "[train][loss]") {
  Rng rng(44);
  Preds s = random_preds(rng, 3, 2);
  train::AugDescriptor identity;
  REQUIRE_THROWS_AS(train::ict_consistency_loss<double>({nullptr}, {&s}, identity, 1.0),
                    rct::StateError);
  // excluded positions may be missing
  Preds t = random_preds(rng, 3, 2);
  Preds s2 = random_preds(rng, 3, 2);
  REQUIRE_NOTHROW(train::ict_consistency_loss<double>({nullptr, &t}, {&s, &s2}, identity, 1.0,
                                                      {false, true}));
}

TEST_CASE("teacher gradient only reaches the student side", "[train][loss][grad]") {
  Rng rng(45);
  const int T = 3, C = 2;
  Preds t = random_preds(rng, T, C);
  Preds s = random_preds(rng, T, C);
  train::AugDescriptor identity;
  PredGrad<double> gs;
  gs.init(T, C);
  const double r = 2.0;
  train::ict_consistency_loss<double>({&t}, {&s}, identity, r, {}, {&gs});
  const double h = 1e-6;
  for (int c = 0; c < C; ++c) {
    const double saved = s.weak[c];
    s.weak[c] = saved + h;
    const double up = train::ict_consistency_loss<double>({&t}, {&s}, identity, r);
    s.weak[c] = saved - h;
    const double dn = train::ict_consistency_loss<double>({&t}, {&s}, identity, r);
    s.weak[c] = saved;
    REQUIRE(std::abs((up - dn) / (2.0 * h) - gs.d_weak[c]) < 1e-6);
  }
}

TEST_CASE("teacher changes leave self-consistency gradients untouched", "[train][loss][grad]") {
  // full-step gradient assembly with two different teachers: the difference
  // must come from the teacher MSE term alone
  Rng rng(46);
  const int T = 4, C = 2;
  Preds orig = random_preds(rng, T, C);
  Preds augd = random_preds(rng, T, C);
  Preds teacher_a = random_preds(rng, T, C);
  Preds teacher_b = random_preds(rng, T, C);
  train::AugDescriptor shift;
  shift.transform.kind = aug::LabelTransform::Kind::kShift;
  shift.transform.n_out = 1;
  const double r = 1.5;

  auto assemble = [&](Preds& teach, PredGrad<double>& go, PredGrad<double>& ga) {
    go.init(T, C);
    ga.init(T, C);
    std::vector<std::vector<PredGrad<double>*>> mt_grads = {{&go}};
    train::meanteacher_loss<double>({{&orig}}, {{&teach}}, {true}, r, mt_grads);
    train::self_consistency_loss<double>({&orig}, {&augd}, shift, r, {&go}, {&ga});
  };
  PredGrad<double> goa, gaa, gob, gab;
  assemble(teacher_a, goa, gaa);
  assemble(teacher_b, gob, gab);

  // mt-only difference on the original branch
  PredGrad<double> ma, mb;
  ma.init(T, C);
  mb.init(T, C);
  std::vector<std::vector<PredGrad<double>*>> wa = {{&ma}}, wb = {{&mb}};
  train::meanteacher_loss<double>({{&orig}}, {{&teacher_a}}, {true}, r, wa);
  train::meanteacher_loss<double>({{&orig}}, {{&teacher_b}}, {true}, r, wb);

  REQUIRE(((goa.d_weak - gob.d_weak) - (ma.d_weak - mb.d_weak)).cwiseAbs().maxCoeff() < 1e-12);
  REQUIRE(((goa.d_strong - gob.d_strong) - (ma.d_strong - mb.d_strong)).cwiseAbs().maxCoeff() <
          1e-12);
  // augmented branch never sees the teacher at all
  REQUIRE(gaa.d_weak == gab.d_weak);
  REQUIRE(gaa.d_strong == gab.d_strong);
}

// ---------------------------------------------------------------------------
// Branch builders

TEST_CASE("strong labels induce a weak head target", "[train][branch]") {
  Rng rng(51);
  train::TrainSample s = random_sample(rng, train::SampleKind::kStrong, 4, 3);
  SampleLabels<float> lab = train::detail::labels_for(s);
  REQUIRE(lab.has_weak);
  REQUIRE(lab.has_strong);
  const Eigen::VectorXf want = s.strong.cast<float>().colwise().maxCoeff().transpose();
  REQUIRE(lab.weak == want);
}

TEST_CASE("hard mix branch pairs within annotation kinds and ORs labels", "[train][branch]") {
  Rng rng(52);
  const int T = 4, C = 3;
  std::vector<train::TrainSample> samples;
  samples.push_back(random_sample(rng, train::SampleKind::kStrong, T, C));
  samples.push_back(random_sample(rng, train::SampleKind::kStrong, T, C));
  samples.push_back(random_sample(rng, train::SampleKind::kWeak, T, C));
  samples.push_back(random_sample(rng, train::SampleKind::kUnlabeled, T, C));
  std::vector<const train::TrainSample*> batch;
  for (auto& s : samples) batch.push_back(&s);

  Rng aug_rng(99);
  train::Branch b = train::detail::make_hard_mix_branch(batch, aug_rng);
  REQUIRE(b.consistency);
  REQUIRE(b.aug.is_mix());
  REQUIRE(b.clips.size() == 4);
  REQUIRE(b.aug.mix_sets.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    REQUIRE(b.aug.mix_sets[i].size() == 2);
    REQUIRE(b.aug.mix_sets[i][0] == static_cast<int>(i));
    const int j = b.aug.mix_sets[i][1];
    REQUIRE(samples[static_cast<std::size_t>(j)].kind == samples[i].kind);
  }
  // the two strong samples can only pick each other; singletons self-mix
  REQUIRE(b.aug.mix_sets[0][1] == 1);
  REQUIRE(b.aug.mix_sets[1][1] == 0);
  REQUIRE(b.aug.mix_sets[2][1] == 2);
  REQUIRE(b.aug.mix_sets[3][1] == 3);

  // labels are the OR of the constituents' ground truth
  const Mat or_strong = samples[0].strong.cwiseMax(samples[1].strong);
  REQUIRE(b.labels[0].has_strong);
  REQUIRE(b.labels[0].strong == or_strong.cast<float>());
  REQUIRE(b.labels[0].weak == or_strong.cast<float>().colwise().maxCoeff().transpose());
  REQUIRE(b.labels[2].has_weak);
  REQUIRE_FALSE(b.labels[2].has_strong);
  REQUIRE(b.labels[2].weak == samples[2].weak.cwiseMax(samples[2].weak).cast<float>());
  REQUIRE_FALSE(b.labels[3].has_weak);

  // clip content equals a direct hard mix of the known partners
  auto direct = aug::hard_mixup({samples[0].clip, samples[1].clip},
                                {samples[0].weak, samples[1].weak},
                                {samples[0].strong, samples[1].strong});
  REQUIRE(b.storage[0].values == direct.clip.values);
}

TEST_CASE("vanilla mix branch interpolates labels with replayed draws", "[train][branch]") {
  Rng rng(53);
  const int T = 3, C = 2;
  std::vector<train::TrainSample> samples;
  samples.push_back(random_sample(rng, train::SampleKind::kWeak, T, C));
  samples.push_back(random_sample(rng, train::SampleKind::kWeak, T, C));
  samples.push_back(random_sample(rng, train::SampleKind::kWeak, T, C));
  std::vector<const train::TrainSample*> batch;
  for (auto& s : samples) batch.push_back(&s);

  const double alpha = 0.2;
  Rng aug_rng(7);
  train::Branch b = train::detail::make_vanilla_mix_branch(batch, alpha, aug_rng);
  REQUIRE_FALSE(b.consistency);
  REQUIRE_FALSE(b.aug.is_mix());

  // replay the same stream: partners first, then one lambda per sample
  Rng replay(7);
  const std::vector<int> partner = train::detail::draw_partners(batch, replay);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double lambda = aug::sample_beta(alpha, replay);
    const auto& p = samples[static_cast<std::size_t>(partner[i])];
    auto direct = aug::vanilla_mixup(samples[i].clip, p.clip, samples[i].weak, p.weak, Mat(),
                                     Mat(), lambda);
    REQUIRE(b.storage[i].values == direct.clip.values);
    REQUIRE(b.labels[i].weak == direct.weak.cast<float>());
  }
}

TEST_CASE("shift branch rotates strong labels exactly with its clips", "[train][branch]") {
  Rng rng(54);
  const int T = 8, C = 2;
  std::vector<train::TrainSample> samples;
  samples.push_back(random_sample(rng, train::SampleKind::kStrong, T, C));
  samples.push_back(random_sample(rng, train::SampleKind::kStrong, T, C));
  std::vector<const train::TrainSample*> batch = {&samples[0], &samples[1]};

  Rng aug_rng(11);
  const int d_max = 5;
  train::Branch b = train::detail::make_shift_branch(batch, d_max, T, aug_rng);
  REQUIRE(b.consistency);
  REQUIRE(b.aug.transform.kind == aug::LabelTransform::Kind::kShift);
  const int n_out = b.aug.transform.n_out;
  bool known_d = false;
  for (int d = 1; d <= d_max; ++d) known_d = known_d || n_out == aug::shift_frames_for(d);
  REQUIRE(known_d);

  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Mat want = aug::rotate_rows(samples[i].strong, n_out, T);
    REQUIRE(b.labels[i].strong == want.cast<float>());
    auto direct = aug::shift_clip_by_frames(samples[i].clip, n_out, T);
    REQUIRE(b.storage[i].values == direct.values);
  }
}

TEST_CASE("shift branch magnitudes are uniform over the allowed range", "[train][branch]") {
  Rng rng(55);
  train::TrainSample s = random_sample(rng, train::SampleKind::kUnlabeled, 4, 2);
  std::vector<const train::TrainSample*> batch = {&s};
  const int d_max = 5;
  std::map<int, int> counts;
  Rng aug_rng(1234);
  const int n_draws = 10000;
  for (int k = 0; k < n_draws; ++k) {
    train::Branch b = train::detail::make_shift_branch(batch, d_max, 4, aug_rng);
    int d = 0;
    for (int cand = 1; cand <= d_max; ++cand) {
      if (b.aug.transform.n_out == aug::shift_frames_for(cand)) d = cand;
    }
    REQUIRE(d >= 1);
    counts[d] += 1;
  }
  REQUIRE(counts.size() == static_cast<std::size_t>(d_max));
  for (const auto& [d, c] : counts) {
    REQUIRE(std::abs(c - n_draws / d_max) < 0.03 * n_draws / d_max + 3.0 * std::sqrt(n_draws / d_max));
  }
}

TEST_CASE("warp branch labels follow the drawn transform", "[train][branch]") {
  Rng rng(56);
  const int T = 8, C = 2;
  std::vector<train::TrainSample> samples;
  samples.push_back(random_sample(rng, train::SampleKind::kStrong, T, C));
  std::vector<const train::TrainSample*> batch = {&samples[0]};
  Rng aug_rng(5);
  bool saw_shift = false, saw_identity = false;
  for (int k = 0; k < 40; ++k) {
    train::Branch b = train::detail::make_warp_branch(batch, 3, T, aug_rng);
    REQUIRE(b.consistency);
    if (b.aug.transform.kind == aug::LabelTransform::Kind::kShift) {
      saw_shift = true;
      const Mat want = aug::rotate_rows(samples[0].strong, b.aug.transform.n_out, T);
      REQUIRE(b.labels[0].strong == want.cast<float>());
    } else {
      saw_identity = true;  // mask and pitch warps leave labels alone
      REQUIRE(b.labels[0].strong == samples[0].strong.cast<float>());
    }
  }
  REQUIRE(saw_shift);
  REQUIRE(saw_identity);
}

TEST_CASE("branch sets follow the strategy table", "[train][branch]") {
  Rng rng(57);
  const int T = 4, C = 2;
  std::vector<train::TrainSample> samples;
  samples.push_back(random_sample(rng, train::SampleKind::kStrong, T, C));
  samples.push_back(random_sample(rng, train::SampleKind::kWeak, T, C));
  std::vector<const train::TrainSample*> batch = {&samples[0], &samples[1]};
  train::TrainConfig cfg = tiny_config();

  auto shapes = [&](train::Strategy s) {
    cfg.strategy = s;
    Rng r(3);
    std::vector<train::Branch> bs = train::detail::build_branches(cfg, batch, T, r);
    std::string out;
    for (const auto& b : bs) {
      if (&b == &bs.front()) {
        out += "orig";
      } else if (b.aug.is_mix()) {
        out += "+hmix";
      } else if (!b.consistency) {
        out += "+vmix";  // interpolated mixup is supervised-only
      } else {
        out += "+warp";
      }
    }
    return std::make_pair(out, bs.size());
  };

  REQUIRE(shapes(train::Strategy::kBaseline) == std::make_pair(std::string("orig"), std::size_t{1}));
  REQUIRE(shapes(train::Strategy::kVanillaMixup) ==
          std::make_pair(std::string("orig+vmix"), std::size_t{2}));
  REQUIRE(shapes(train::Strategy::kHardMixup) ==
          std::make_pair(std::string("orig+hmix"), std::size_t{2}));
  REQUIRE(shapes(train::Strategy::kRandWarp) ==
          std::make_pair(std::string("orig+hmix+warp"), std::size_t{3}));
  REQUIRE(shapes(train::Strategy::kRct) ==
          std::make_pair(std::string("orig+hmix+warp"), std::size_t{3}));
  REQUIRE(shapes(train::Strategy::kIct) ==
          std::make_pair(std::string("orig+hmix+warp"), std::size_t{3}));
  REQUIRE(shapes(train::Strategy::kSct).second == 3);
  REQUIRE(shapes(train::Strategy::kIctSct).second == 4);

  cfg.augmentation = false;
  for (train::Strategy s : train::all_strategies()) {
    cfg.strategy = s;
    Rng r(3);
    REQUIRE(train::detail::build_branches(cfg, batch, T, r).size() == 1);
  }
}

// ---------------------------------------------------------------------------
// Configuration

TEST_CASE("strategy names round trip and reject unknowns", "[train][config]") {
  for (train::Strategy s : train::all_strategies()) {
    REQUIRE(train::strategy_from_name(train::strategy_name(s)) == s);
  }
  REQUIRE_THROWS_WITH(train::strategy_from_name("warp"),
                      Catch::Matchers::ContainsSubstring("ict-sct"));
}

TEST_CASE("config parser round trips every key", "[train][config]") {
  const std::string text =
      "# run settings\n"
      "batch_weak = 3\n"
      "batch_strong = 4\n"
      "batch_unlabeled = 5\n"
      "epochs = 7\n"
      "warmup_epochs = 2   # inline comment\n"
      "lr_max = 0.002\n"
      "consistency_max = 1.5\n"
      "ema_decay = 0.95\n"
      "d_max = 3\n"
      "strategy = ict-sct\n"
      "seed = 42\n"
      "adam_beta1 = 0.8\n"
      "adam_beta2 = 0.99\n"
      "adam_eps = 1e-9\n"
      "channels = 4, 8, 16\n"
      "gru_hidden = 8\n"
      "gru_layers = 1\n"
      "mixup_alpha = 0.3\n"
      "augmentation = false\n"
      "\n";
  const train::TrainConfig cfg = train::parse_train_config(text);
  REQUIRE(cfg.batch_weak == 3);
  REQUIRE(cfg.batch_strong == 4);
  REQUIRE(cfg.batch_unlabeled == 5);
  REQUIRE(cfg.epochs == 7);
  REQUIRE(cfg.warmup_epochs == 2);
  REQUIRE(cfg.lr_max == 0.002);
  REQUIRE(cfg.consistency_max == 1.5);
  REQUIRE(cfg.ema_decay == 0.95);
  REQUIRE(cfg.d_max == 3);
  REQUIRE(cfg.strategy == train::Strategy::kIctSct);
  REQUIRE(cfg.seed == 42);
  REQUIRE(cfg.adam_beta1 == 0.8);
  REQUIRE(cfg.adam_beta2 == 0.99);
  REQUIRE(cfg.adam_eps == 1e-9);
  REQUIRE(cfg.channels == std::array<int, 3>{4, 8, 16});
  REQUIRE(cfg.gru_hidden == 8);
  REQUIRE(cfg.gru_layers == 1);
  REQUIRE(cfg.mixup_alpha == 0.3);
  REQUIRE_FALSE(cfg.augmentation);
}

TEST_CASE("config parser rejects malformed input", "[train][config]") {
  REQUIRE_THROWS_WITH(train::parse_train_config("momentum = 0.9\n"),
                      Catch::Matchers::ContainsSubstring("unknown key 'momentum'"));
  REQUIRE_THROWS_AS(train::parse_train_config("epochs ten\n"), rct::ConfigError);
  REQUIRE_THROWS_AS(train::parse_train_config("epochs = ten\n"), rct::ConfigError);
  REQUIRE_THROWS_AS(train::parse_train_config("augmentation = maybe\n"), rct::ConfigError);
  REQUIRE_THROWS_AS(train::parse_train_config("channels = 4, 8\n"), rct::ConfigError);
  REQUIRE_THROWS_AS(train::parse_train_config("strategy = warp\n"), rct::ConfigError);
}

TEST_CASE("config validation rejects out-of-range values", "[train][config]") {
  auto broken = [](auto&& mutate) {
    train::TrainConfig cfg;
    mutate(cfg);
    return cfg;
  };
  REQUIRE_THROWS_AS(broken([](auto& c) { c.d_max = 0; }).validate(), rct::ConfigError);
  REQUIRE_THROWS_AS(broken([](auto& c) { c.d_max = 10; }).validate(), rct::ConfigError);
  REQUIRE_THROWS_AS(broken([](auto& c) { c.ema_decay = 1.0; }).validate(), rct::ConfigError);
  REQUIRE_THROWS_AS(broken([](auto& c) { c.warmup_epochs = c.epochs + 1; }).validate(),
                    rct::ConfigError);
  REQUIRE_THROWS_AS(broken([](auto& c) { c.lr_max = 0.0; }).validate(), rct::ConfigError);
  REQUIRE_THROWS_AS(broken([](auto& c) { c.gru_layers = 3; }).validate(), rct::ConfigError);
  REQUIRE_THROWS_AS(broken([](auto& c) { c.adam_beta1 = 1.0; }).validate(), rct::ConfigError);
  REQUIRE_NOTHROW(train::TrainConfig{}.validate());
  REQUIRE_NOTHROW(train::desk_config().validate());
  REQUIRE(train::desk_config().epochs == 40);
  REQUIRE(train::desk_config().channels == std::array<int, 3>{4, 8, 16});
}

// ---------------------------------------------------------------------------
// Training loop

TEST_CASE("baseline training never reports self-consistency", "[train][integration]") {
  train::TrainConfig cfg = tiny_config();
  cfg.strategy = train::Strategy::kBaseline;
  train::TrainData data = tiny_dataset(61, 2, 2, 2, 1);
  train::TrainResult res = train::train(cfg, data);
  REQUIRE(res.reports.size() == 2);  // 2 epochs x 1 step
  bool saw_mt = false;
  for (const auto& rep : res.reports) {
    REQUIRE(rep.self_consistency == 0.0);
    REQUIRE(rep.total == rep.supervised + rep.meanteacher + rep.self_consistency);
    saw_mt = saw_mt || rep.meanteacher > 0.0;
  }
  REQUIRE(saw_mt);  // after warmup the teacher term engages
  REQUIRE(res.val_curve.size() == 2);
}

TEST_CASE("teacher-consistency strategies fold their term into the teacher column",
          "[train][integration]") {
  train::TrainConfig cfg = tiny_config();
  cfg.strategy = train::Strategy::kSct;
  train::TrainData data = tiny_dataset(62, 2, 2, 2, 0);
  train::TrainResult res = train::train(cfg, data);
  bool saw_mt = false;
  for (const auto& rep : res.reports) {
    REQUIRE(rep.self_consistency == 0.0);
    saw_mt = saw_mt || rep.meanteacher > 0.0;
  }
  REQUIRE(saw_mt);
}

TEST_CASE("rct training engages the self-consistency term", "[train][integration]") {
  train::TrainConfig cfg = tiny_config();
  cfg.strategy = train::Strategy::kRct;
  train::TrainData data = tiny_dataset(63, 2, 2, 2, 0);
  train::TrainResult res = train::train(cfg, data);
  bool saw_sc = false;
  for (const auto& rep : res.reports) {
    REQUIRE(rep.total == rep.supervised + rep.meanteacher + rep.self_consistency);
    saw_sc = saw_sc || rep.self_consistency > 0.0;
  }
  REQUIRE(saw_sc);
}

TEST_CASE("training is bit-deterministic for a fixed seed", "[train][integration]") {
  train::TrainConfig cfg = tiny_config();
  cfg.strategy = train::Strategy::kRct;
  train::TrainData data = tiny_dataset(64, 2, 2, 2, 1);
  train::TrainResult a = train::train(cfg, data);
  train::TrainResult b = train::train(cfg, data);
  REQUIRE(a.reports.size() == b.reports.size());
  for (std::size_t i = 0; i < a.reports.size(); ++i) {
    REQUIRE(a.reports[i].supervised == b.reports[i].supervised);
    REQUIRE(a.reports[i].meanteacher == b.reports[i].meanteacher);
    REQUIRE(a.reports[i].self_consistency == b.reports[i].self_consistency);
    REQUIRE(a.reports[i].total == b.reports[i].total);
  }
  REQUIRE(tensors_equal(a.student, b.student));
  REQUIRE(tensors_equal(a.teacher, b.teacher));

  cfg.seed = 65;
  train::TrainResult c = train::train(cfg, data);
  REQUIRE_FALSE(tensors_equal(a.student, c.student));
}

TEST_CASE("all strategies collapse to baseline when augmentation is off", "[train][integration]") {
  // single step: the consistency ramp starts at zero, so only the branch set
  // could differ, and disabling augmentation removes it
  train::TrainConfig cfg = tiny_config();
  cfg.epochs = 1;
  cfg.warmup_epochs = 1;
  cfg.augmentation = false;
  train::TrainData data = tiny_dataset(66, 2, 2, 2, 0);

  cfg.strategy = train::Strategy::kBaseline;
  train::TrainResult base = train::train(cfg, data);
  for (train::Strategy s : train::all_strategies()) {
    cfg.strategy = s;
    train::TrainResult res = train::train(cfg, data);
    REQUIRE(tensors_equal(res.student, base.student));
    REQUIRE(res.reports[0].total == base.reports[0].total);
  }
}

TEST_CASE("metrics and checkpoints land in the output directory", "[train][integration]") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "rct_train_test_out";
  fs::remove_all(dir);
  train::TrainConfig cfg = tiny_config();
  cfg.strategy = train::Strategy::kRct;
  train::TrainData data = tiny_dataset(67, 2, 2, 2, 1);
  train::TrainResult res = train::train(cfg, data, dir);

  std::ifstream in(dir / "metrics.csv");
  REQUIRE(in.good());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  REQUIRE(lines.size() == 3);  // header + 2 steps
  REQUIRE(lines[0] == "epoch,step,supervised,meanteacher,self_consistency,total,val_bce,lr,r");
  // single step per epoch: every data row carries the epoch's validation BCE
  for (std::size_t i = 1; i < lines.size(); ++i) {
    std::vector<std::string> cells;
    std::stringstream ss(lines[i]);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    REQUIRE(cells.size() == 9);
    REQUIRE(cells[0] == std::to_string(i - 1));
    REQUIRE(cells[1] == std::to_string(i - 1));
    REQUIRE(std::stod(cells[6]) == res.val_curve[i - 1]);
    const std::int64_t step = i - 1;
    REQUIRE(std::stod(cells[8]) == train::ramp(step, 1, cfg.consistency_max));
    REQUIRE(std::stod(cells[7]) == train::lr_schedule(step, 1, cfg.lr_max));
  }

  auto final_ck = rct::model::load_checkpoint<float>(dir / "checkpoint_final.bin");
  REQUIRE(tensors_equal(final_ck.student, res.student));
  REQUIRE(tensors_equal(final_ck.teacher, res.teacher));
  auto best_ck = rct::model::load_checkpoint<float>(dir / "checkpoint_best.bin");
  REQUIRE(tensors_equal(best_ck.student, res.best_student));

  // identical reruns produce byte-identical metrics
  const fs::path dir2 = fs::temp_directory_path() / "rct_train_test_out2";
  fs::remove_all(dir2);
  train::train(cfg, data, dir2);
  std::ifstream f1(dir / "metrics.csv"), f2(dir2 / "metrics.csv");
  std::stringstream s1, s2;
  s1 << f1.rdbuf();
  s2 << f2.rdbuf();
  REQUIRE(s1.str() == s2.str());
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST_CASE("the best checkpoint minimizes the validation curve", "[train][integration]") {
  train::TrainConfig cfg = tiny_config();
  cfg.epochs = 3;
  cfg.warmup_epochs = 1;
  train::TrainData data = tiny_dataset(68, 2, 2, 2, 2);
  train::TrainResult res = train::train(cfg, data);
  REQUIRE(res.val_curve.size() == 3);
  REQUIRE(res.best_epoch >= 0);
  REQUIRE(res.best_epoch < 3);
  double best = res.val_curve[0];
  for (double v : res.val_curve) best = std::min(best, v);
  REQUIRE(res.val_curve[static_cast<std::size_t>(res.best_epoch)] == best);
  const double replayed = train::validation_bce(res.net, res.best_student, data.val);
  REQUIRE(std::abs(replayed - best) < 1e-12);
}

TEST_CASE("training aborts on non-finite input with a final checkpoint", "[train][integration]") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "rct_train_test_abort";
  fs::remove_all(dir);
  train::TrainConfig cfg = tiny_config();
  cfg.strategy = train::Strategy::kBaseline;
  train::TrainData data = tiny_dataset(69, 2, 2, 2, 0);
  data.strong[0].clip.values(1, 1) = std::numeric_limits<double>::quiet_NaN();
  REQUIRE_THROWS_AS(train::train(cfg, data, dir), rct::NumericalError);
  REQUIRE(fs::exists(dir / "checkpoint_final.bin"));
  std::ifstream in(dir / "metrics.csv");
  REQUIRE(in.good());
  std::string header;
  REQUIRE(std::getline(in, header).good());
  REQUIRE(header == "epoch,step,supervised,meanteacher,self_consistency,total,val_bce,lr,r");
  fs::remove_all(dir);
}

TEST_CASE("training rejects unusable datasets", "[train][integration]") {
  train::TrainConfig cfg = tiny_config();
  train::TrainData empty;
  empty.n_classes = 2;
  REQUIRE_THROWS_AS(train::train(cfg, empty), rct::ConfigError);

  train::TrainData data = tiny_dataset(70, 1, 1, 1, 0);
  data.n_classes = 0;
  REQUIRE_THROWS_AS(train::train(cfg, data), rct::ConfigError);

  train::TrainData bad = tiny_dataset(71, 2, 0, 0, 0);
  bad.strong[1].strong = Mat::Zero(3, 2);  // wrong frame count
  REQUIRE_THROWS_AS(train::train(cfg, bad), rct::ShapeError);
}

TEST_CASE("config formatting round-trips through the parser", "[train][config]") {
  std::vector<train::TrainConfig> configs = {train::TrainConfig{}, train::desk_config(),
                                             tiny_config()};
  configs.push_back(train::desk_config());
  configs.back().strategy = train::Strategy::kIctSct;
  configs.back().lr_max = 3.25e-4;
  configs.back().augmentation = false;
  configs.back().seed = 987654321;
  for (const auto& cfg : configs) {
    const train::TrainConfig back = train::parse_train_config(train::format_train_config(cfg));
    REQUIRE(back.batch_weak == cfg.batch_weak);
    REQUIRE(back.batch_strong == cfg.batch_strong);
    REQUIRE(back.batch_unlabeled == cfg.batch_unlabeled);
    REQUIRE(back.epochs == cfg.epochs);
    REQUIRE(back.warmup_epochs == cfg.warmup_epochs);
    REQUIRE(back.lr_max == cfg.lr_max);
    REQUIRE(back.consistency_max == cfg.consistency_max);
    REQUIRE(back.ema_decay == cfg.ema_decay);
    REQUIRE(back.d_max == cfg.d_max);
    REQUIRE(back.strategy == cfg.strategy);
    REQUIRE(back.seed == cfg.seed);
    REQUIRE(back.adam_beta1 == cfg.adam_beta1);
    REQUIRE(back.adam_beta2 == cfg.adam_beta2);
    REQUIRE(back.adam_eps == cfg.adam_eps);
    REQUIRE(back.channels == cfg.channels);
    REQUIRE(back.gru_hidden == cfg.gru_hidden);
    REQUIRE(back.gru_layers == cfg.gru_layers);
    REQUIRE(back.mixup_alpha == cfg.mixup_alpha);
    REQUIRE(back.augmentation == cfg.augmentation);
  }
}

TEST_CASE("branch count agrees with the branches actually built", "[train][strategy]") {
  const train::TrainData data = tiny_dataset(72, 3, 3, 3, 0);
  std::vector<const train::TrainSample*> batch;
  for (const auto& s : data.strong) batch.push_back(&s);
  for (const auto& s : data.weak) batch.push_back(&s);
  for (const auto& s : data.unlabeled) batch.push_back(&s);
  for (train::Strategy s : train::all_strategies()) {
    train::TrainConfig cfg = tiny_config();
    cfg.strategy = s;
    Rng rng(99);
    const auto branches = train::detail::build_branches(cfg, batch, 4, rng);
    REQUIRE(train::branch_count(cfg) == static_cast<int>(branches.size()));
    cfg.augmentation = false;
    Rng rng2(99);
    const auto plain = train::detail::build_branches(cfg, batch, 4, rng2);
    REQUIRE(train::branch_count(cfg) == 1);
    REQUIRE(plain.size() == 1);
  }
}
