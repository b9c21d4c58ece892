// Pairwise preference loss, reward-model training loops, per-domain
// registries, and the domain router.

#include "rmroute/train.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <limits>

#include "rmroute/checkpoint.hpp"
#include "testutil.hpp"

namespace rmroute {
namespace {

EncoderConfig tiny_cfg() {
  EncoderConfig cfg;
  cfg.vocab_size = 96;
  cfg.max_len = 16;
  cfg.hidden = 32;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.ffn = 48;
  cfg.dropout = 0.1f;
  return cfg;
}

SynthOptions tiny_synth(int domains, int train_n, int test_n, uint64_t seed) {
  SynthOptions opt;
  opt.domains = domains;
  opt.train_per_domain = train_n;
  opt.test_per_domain = test_n;
  opt.mode = SynthMode::kDisjoint;
  opt.seed = seed;
  return opt;
}

std::vector<uint8_t> tensor_bytes(const NamedTensors& w) {
  std::vector<uint8_t> out;
  for (const auto& [name, t] : w) {  // map order: deterministic
    const auto* p = reinterpret_cast<const uint8_t*>(t->data.data());
    out.insert(out.end(), p, p + t->data.size() * sizeof(float));
  }
  return out;
}

double pair_accuracy(const RewardModel& m, const std::vector<RewardExample>& data) {
  int hits = 0;
  for (const auto& ex : data)
    if (model_score(m, ex.prompt, ex.chosen) > model_score(m, ex.prompt, ex.rejected)) ++hits;
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

TEST(PairwiseLoss, ClosedFormAnchors) {
  EXPECT_NEAR(pairwise_loss(0.0, 0.0), 0.6931471805599453, 1e-12);   // ln 2 at a tie
  EXPECT_NEAR(pairwise_loss(1.0, 0.0), 0.3132616875182228, 1e-12);   // −ln σ(1)
  EXPECT_NEAR(pairwise_loss(20.0, 0.0), 2.0611536203143807e-9, 1e-20);
  EXPECT_NEAR(pairwise_loss(0.0, 20.0), 20.0, 1e-8);  // ≈ −Δ for very wrong rankings
  EXPECT_NEAR(pairwise_loss(0.0, 100.0), 100.0, 1e-12);
}

TEST(PairwiseLoss, DependsOnlyOnTheDifference) {
  const double a = 0.5, b = 0.25;
  const double base = pairwise_loss(a, b);
  for (double shift : {1.0, 256.0, -4096.0})  // exact in binary floating point
    EXPECT_EQ(pairwise_loss(a + shift, b + shift), base);
}

TEST(PairwiseLoss, MonotonicallyDecreasingInMargin) {
  double prev = pairwise_loss(-5.0, 0.0);
  for (double d = -4.0; d <= 5.0; d += 1.0) {
    const double cur = pairwise_loss(d, 0.0);
    EXPECT_LT(cur, prev);
    prev = cur;
  }
}

TEST(PairwiseLoss, RejectsNonFiniteInputs) {
  const double inf = std::numeric_limits<double>::infinity();
  const double nan = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(pairwise_loss(inf, 0.0), std::invalid_argument);
  EXPECT_THROW(pairwise_loss(0.0, -inf), std::invalid_argument);
  EXPECT_THROW(pairwise_loss(nan, 1.0), std::invalid_argument);
}

TEST(PairwiseLoss, GraphMatchesScalarReference) {
  for (float rc : {-3.0f, -0.5f, 0.0f, 0.7f, 4.0f}) {
    for (float rr : {-2.0f, 0.0f, 1.5f}) {
      auto c = make_tensor({1, 1}, {rc});
      auto r = make_tensor({1, 1}, {rr});
      auto loss = pairwise_loss_graph(c, r);
      EXPECT_NEAR(loss->item(), pairwise_loss(rc, rr), 1e-6);
    }
  }
}

TEST(PairwiseLoss, GradientIsSigmoidMinusOne) {
  // dL/dr_chosen = σ(Δ) − 1, dL/dr_rejected = 1 − σ(Δ)
  auto c = make_tensor({1, 1}, std::vector<float>{1.0f}, true);
  auto r = make_tensor({1, 1}, std::vector<float>{0.0f}, true);
  auto loss = pairwise_loss_graph(c, r);
  backward(loss);
  const double sig = 1.0 / (1.0 + std::exp(-1.0));  // σ(1) = 0.731058...
  EXPECT_NEAR(c->grad[0], sig - 1.0, 1e-6);
  EXPECT_NEAR(r->grad[0], 1.0 - sig, 1e-6);
  EXPECT_NEAR(c->grad[0] + r->grad[0], 0.0, 1e-7);
}

TEST(PairwiseLoss, GradientMatchesNumericProbe) {
  std::map<std::string, TensorPtr> params;
  params["c"] = make_tensor({1, 1}, std::vector<float>{0.3f}, true);
  params["r"] = make_tensor({1, 1}, std::vector<float>{-0.2f}, true);
  testutil::expect_gradients_match(params, [&] {
    return pairwise_loss_graph(params.at("c"), params.at("r"));
  });
}

TEST(TrainConfig, PresetsAndValidation) {
  const auto desk = desk_preset();
  EXPECT_FLOAT_EQ(desk.lr, 1e-3f);
  EXPECT_EQ(desk.batch_size, 16);
  EXPECT_EQ(desk.epochs, 3);

  const auto paper = paper_preset();
  EXPECT_FLOAT_EQ(paper.lr, 5e-6f);
  EXPECT_EQ(paper.batch_size, 32);
  EXPECT_EQ(paper.epochs, 3);

  TrainConfig bad = desk;
  bad.epochs = 0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = desk;
  bad.batch_size = 0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = desk;
  bad.lr = -1.0f;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}

TEST(Train, ZeroLearningRateLeavesWeightsBitwiseUnchanged) {
  auto data = synth_examples(tiny_synth(2, 8, 2, 11)).train;
  auto vocab = vocab_from_examples(data, 96);
  auto model = make_full_reward_model(tiny_cfg(), vocab, 5);
  const auto before = tensor_bytes(*model.backbone);

  TrainConfig cfg = desk_preset();
  cfg.lr = 0.0f;
  cfg.epochs = 1;
  cfg.seed = 7;
  train_reward_model(model, data, cfg);
  const auto after = tensor_bytes(*model.backbone);
  ASSERT_EQ(before.size(), after.size());
  EXPECT_EQ(0, std::memcmp(before.data(), after.data(), before.size()));
}

TEST(Train, LossImprovesOnSeparableData) {
  auto data = synth_examples(tiny_synth(2, 30, 5, 3)).train;
  auto vocab = vocab_from_examples(data, 96);
  auto model = make_full_reward_model(tiny_cfg(), vocab, 21);
  TrainConfig cfg = desk_preset();
  cfg.seed = 13;
  auto report = train_reward_model(model, data, cfg);
  ASSERT_EQ(static_cast<int>(report.epochs.size()), cfg.epochs);
  EXPECT_LT(report.epochs.back().mean_loss, report.epochs.front().mean_loss);
  EXPECT_LT(report.epochs.back().mean_loss, 0.6931);  // better than indifference
  for (const auto& e : report.epochs) EXPECT_GE(e.seconds, 0.0);
  EXPECT_NEAR(report.total_seconds,
              report.epochs[0].seconds + report.epochs[1].seconds + report.epochs[2].seconds,
              1e-9);
  EXPECT_NE(report.metrics_log().find("epoch=1 mean_loss="), std::string::npos);
}

TEST(Train, RepeatRunsAreBitIdentical) {
  auto data = synth_examples(tiny_synth(2, 12, 2, 9)).train;
  auto vocab = vocab_from_examples(data, 96);
  TrainConfig cfg = desk_preset();
  cfg.epochs = 2;
  cfg.seed = 31;

  auto m1 = make_full_reward_model(tiny_cfg(), vocab, 4);
  auto r1 = train_reward_model(m1, data, cfg);
  auto m2 = make_full_reward_model(tiny_cfg(), vocab, 4);
  auto r2 = train_reward_model(m2, data, cfg);

  const auto b1 = tensor_bytes(*m1.backbone);
  const auto b2 = tensor_bytes(*m2.backbone);
  ASSERT_EQ(b1.size(), b2.size());
  EXPECT_EQ(0, std::memcmp(b1.data(), b2.data(), b1.size()));
  for (size_t e = 0; e < r1.epochs.size(); ++e)
    EXPECT_EQ(r1.epochs[e].mean_loss, r2.epochs[e].mean_loss);
}

TEST(Train, SharedPairDropoutFlagChangesTheRun) {
  auto data = synth_examples(tiny_synth(2, 10, 2, 17)).train;
  auto vocab = vocab_from_examples(data, 96);
  TrainConfig cfg = desk_preset();
  cfg.epochs = 1;
  cfg.seed = 2;

  auto independent = make_full_reward_model(tiny_cfg(), vocab, 6);
  train_reward_model(independent, data, cfg);
  cfg.shared_pair_dropout = true;
  auto shared = make_full_reward_model(tiny_cfg(), vocab, 6);
  train_reward_model(shared, data, cfg);

  const auto b1 = tensor_bytes(*independent.backbone);
  const auto b2 = tensor_bytes(*shared.backbone);
  ASSERT_EQ(b1.size(), b2.size());
  EXPECT_NE(0, std::memcmp(b1.data(), b2.data(), b1.size()));
}

TEST(Train, AdapterRunFreezesBackboneBitwise) {
  auto data = synth_examples(tiny_synth(2, 12, 2, 5)).train;
  auto vocab = vocab_from_examples(data, 96);
  const auto ecfg = tiny_cfg();
  auto backbone = std::make_shared<NamedTensors>(init_weights(ecfg, 99));
  const auto before = tensor_bytes(*backbone);

  AdapterSpec spec;
  spec.rank = 4;
  spec.alpha = 8.0f;
  spec.dropout = 0.0f;
  spec.targets = default_adapter_targets(ecfg);
  auto model = make_lora_reward_model(backbone, ecfg, spec, vocab, 42, "unit");

  TrainConfig cfg = desk_preset();
  cfg.epochs = 2;
  cfg.seed = 77;
  auto report = train_reward_model(model, data, cfg);
  EXPECT_LT(report.epochs.back().mean_loss, report.epochs.front().mean_loss);

  const auto after = tensor_bytes(*backbone);
  ASSERT_EQ(before.size(), after.size());
  EXPECT_EQ(0, std::memcmp(before.data(), after.data(), before.size()));
  for (const auto& [name, t] : *backbone) EXPECT_TRUE(t->grad.empty()) << name;

  // Only adapter tensors plus the private head are updated.
  auto params = trainable_params(model);
  for (const auto& [name, t] : params)
    EXPECT_TRUE(name.rfind("adapter.", 0) == 0 || name.rfind("head.", 0) == 0) << name;
  EXPECT_EQ(params.size(), model.adapter->tensors.size() + 2);
}

TEST(Train, MoEHeadRunImprovesAndTouchesOnlySelectedExperts) {
  auto data = synth_examples(tiny_synth(2, 16, 2, 23)).train;
  auto vocab = vocab_from_examples(data, 96);
  const auto ecfg = tiny_cfg();
  MoEConfig moe;
  moe.num_experts = 3;
  moe.top_k = 2;
  moe.expert_dim = 24;
  moe.load_balance_coeff = 0.01f;
  auto model = make_moe_reward_model(ecfg, moe, vocab, 14);
  EXPECT_EQ(model.backbone->count("head.weight"), 0u);  // mixture owns the regression layer
  EXPECT_EQ(model.backbone->count("moe.head.weight"), 1u);

  TrainConfig cfg = desk_preset();
  cfg.epochs = 2;
  cfg.seed = 55;
  cfg.method = "more";
  auto report = train_reward_model(model, data, cfg);
  EXPECT_EQ(report.method, "more");
  EXPECT_LT(report.epochs.back().mean_loss, report.epochs.front().mean_loss);
}

TEST(Train, RejectsEmptyAndMixedDomainInputs) {
  auto data = synth_examples(tiny_synth(2, 4, 2, 1)).train;
  auto vocab = vocab_from_examples(data, 96);
  auto model = make_full_reward_model(tiny_cfg(), vocab, 1);
  TrainConfig cfg = desk_preset();
  EXPECT_THROW(train_reward_model(model, {}, cfg), std::invalid_argument);
  EXPECT_THROW(train_reward_model(model, data, cfg, /*require_single_domain=*/true),
               std::invalid_argument);
}

TEST(Train, PerDomainRegistryReachesHighHeldOutAccuracy) {
  auto synth = synth_examples(tiny_synth(2, 60, 20, 41));
  TrainConfig cfg = desk_preset();
  cfg.seed = 100;
  auto reg = train_all_domains(synth.train, cfg, tiny_cfg());
  ASSERT_EQ(reg.domains.size(), 2u);
  ASSERT_EQ(reg.models.size(), 2u);
  auto test_groups = group_by_domain(synth.test);
  for (const auto& domain : reg.domains) {
    const double acc = pair_accuracy(reg.models.at(domain), test_groups.at(domain));
    EXPECT_GT(acc, 0.9) << domain;
    EXPECT_GT(reg.reports.at(domain).total_seconds, 0.0);
  }
}

TEST(Train, RegistryRejectsMissingExpectedDomain) {
  auto data = synth_examples(tiny_synth(2, 4, 2, 2)).train;
  TrainConfig cfg = desk_preset();
  EXPECT_THROW(
      train_all_domains(data, cfg, tiny_cfg(), std::nullopt, nullptr, {"alpha", "zulu"}),
      std::invalid_argument);
}

TEST(Train, RegistrySeedsDifferPerDomain) {
  auto synth = synth_examples(tiny_synth(2, 10, 2, 8));
  TrainConfig cfg = desk_preset();
  cfg.epochs = 1;
  cfg.seed = 500;
  auto reg = train_all_domains(synth.train, cfg, tiny_cfg());
  const auto& a = *reg.models.at(reg.domains[0]).backbone;
  const auto& b = *reg.models.at(reg.domains[1]).backbone;
  // Different seeds (500, 501) give different initializations, so the two
  // models must not collide even before the data differences matter.
  EXPECT_NE(tensor_bytes(a), tensor_bytes(b));
}

TEST(Router, LearnsDisjointDomainsAboveNinetyFivePercent) {
  auto synth = synth_examples(tiny_synth(3, 40, 15, 61));
  TrainConfig cfg = desk_preset();
  cfg.lr = 3e-3f;
  cfg.epochs = 8;
  cfg.seed = 9;
  auto [router, report] = train_router(synth.train, cfg, tiny_cfg());
  ASSERT_EQ(router.domains.size(), 3u);
  EXPECT_LT(report.epochs.back().mean_loss, report.epochs.front().mean_loss);

  int hits = 0;
  for (const auto& ex : synth.test) {
    auto d = route(router, ex.prompt);
    ASSERT_EQ(d.probabilities.size(), 3u);
    float sum = 0;
    for (float p : d.probabilities) sum += p;
    EXPECT_NEAR(sum, 1.0f, 1e-5f);
    if (d.domain == ex.domain) ++hits;
  }
  const double acc = static_cast<double>(hits) / static_cast<double>(synth.test.size());
  EXPECT_GE(acc, 0.95);
}

TEST(Router, AdapterVariantLeavesSharedBackboneBitwiseUnchanged) {
  auto synth = synth_examples(tiny_synth(2, 50, 10, 71));
  const auto ecfg = tiny_cfg();
  auto backbone = std::make_shared<NamedTensors>(init_weights(ecfg, 1234));
  const auto before = tensor_bytes(*backbone);

  AdapterSpec spec;
  spec.rank = 4;
  spec.alpha = 16.0f;
  spec.dropout = 0.0f;
  spec.targets = default_adapter_targets(ecfg);
  TrainConfig cfg = desk_preset();
  cfg.lr = 3e-3f;
  cfg.epochs = 10;
  cfg.seed = 19;
  auto [router, report] = train_router(synth.train, cfg, ecfg, spec, backbone);

  const auto after = tensor_bytes(*backbone);
  EXPECT_EQ(0, std::memcmp(before.data(), after.data(), before.size()));

  int hits = 0;
  for (const auto& ex : synth.test)
    if (route(router, ex.prompt).domain == ex.domain) ++hits;
  EXPECT_GE(static_cast<double>(hits) / static_cast<double>(synth.test.size()), 0.95);
}

TEST(Router, RejectsSingleDomainData) {
  auto data = synth_examples(tiny_synth(1, 6, 2, 3)).train;
  TrainConfig cfg = desk_preset();
  EXPECT_THROW(train_router(data, cfg, tiny_cfg()), std::invalid_argument);
  EXPECT_THROW(train_router({}, cfg, tiny_cfg()), std::invalid_argument);
}

TEST(Router, ArgmaxTieBreaksToLowestIndex) {
  const auto ecfg = tiny_cfg();
  RouterModel r;
  r.cfg = ecfg;
  r.domains = {"aa", "bb", "cc"};
  r.vocab = build_vocab({"x"}, ecfg.vocab_size);
  auto w = init_weights(ecfg, 7);
  w.erase("head.weight");
  w.erase("head.bias");
  w["head.weight"] = make_tensor({3, ecfg.hidden});  // zeros: all logits equal
  w["head.bias"] = make_tensor({3});
  r.backbone = std::make_shared<NamedTensors>(std::move(w));

  auto d = route(r, "x");
  EXPECT_EQ(d.domain, "aa");
  EXPECT_FLOAT_EQ(d.probabilities[0], d.probabilities[1]);
  EXPECT_FLOAT_EQ(d.probabilities[1], d.probabilities[2]);
  EXPECT_THROW(r.domain_index("zz"), std::invalid_argument);
}

TEST(Router, TrainedRoutingIsDeterministic) {
  auto synth = synth_examples(tiny_synth(2, 12, 4, 88));
  TrainConfig cfg = desk_preset();
  cfg.epochs = 1;
  cfg.seed = 3;
  auto [r1, rep1] = train_router(synth.train, cfg, tiny_cfg());
  auto [r2, rep2] = train_router(synth.train, cfg, tiny_cfg());
  for (const auto& ex : synth.test) {
    auto d1 = route(r1, ex.prompt);
    auto d2 = route(r2, ex.prompt);
    EXPECT_EQ(d1.domain, d2.domain);
    EXPECT_EQ(d1.probabilities, d2.probabilities);
  }
}

}  // namespace
}  // namespace rmroute
