// Method assemblies: parameter accounting, the adapter host, routed scoring,
// persistence round trips, and incremental domain extension.

#include "rmroute/dispatch.hpp"

#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

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

EncoderConfig desk_cfg() {
  EncoderConfig cfg;  // library defaults: 512/64/64/2/4/128/0.1
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

BuildOptions tiny_build(uint64_t seed, int epochs = 1) {
  BuildOptions opts;
  opts.encoder = tiny_cfg();
  opts.moe.num_experts = 3;
  opts.moe.top_k = 2;
  opts.moe.expert_dim = 24;
  opts.adapter.rank = 4;
  opts.adapter.alpha = 8.0f;
  opts.adapter.dropout = 0.0f;
  opts.train = desk_preset();
  opts.train.epochs = epochs;
  opts.train.seed = seed;
  return opts;
}

std::vector<uint8_t> tensor_bytes(const NamedTensors& w) {
  std::vector<uint8_t> out;
  for (const auto& [name, t] : w) {
    const auto* p = reinterpret_cast<const uint8_t*>(t->data.data());
    out.insert(out.end(), p, p + t->data.size() * sizeof(float));
  }
  return out;
}

TEST(ParamCounts, CoarseArithmeticAnchors) {
  // five 1M models plus a 1M router
  auto rodos = parameter_report_from_counts("rodos", 1'000'000, 20'000, 5, 1'000'000);
  EXPECT_EQ(rodos.total, 6'000'000);
  EXPECT_NEAR(rodos.percent_of_reference, 600.0, 1e-9);

  // one backbone plus six 20k adapters, expressed relative to the rodos total
  auto arliss = parameter_report_from_counts("arliss", 1'000'000, 20'000, 5, rodos.total);
  EXPECT_EQ(arliss.total, 1'120'000);
  EXPECT_NEAR(arliss.percent_of_reference, 18.7, 0.05);

  // published-scale sanity ratio: 197M over a 435M reference
  auto ratio = parameter_report_from_counts("baseline", 197'000'000, 0, 1, 435'000'000);
  EXPECT_NEAR(ratio.percent_of_reference, 45.3, 0.1);

  // degenerate: one domain, zero-size adapters collapse onto the backbone
  auto degenerate = parameter_report_from_counts("arliss", 777, 0, 1, 777);
  EXPECT_EQ(degenerate.total, 777);

  // totals always equal the component sum
  for (const auto* method : {"baseline", "base-lora", "more", "rodos", "arliss"}) {
    auto r = parameter_report_from_counts(method, 1234, 99, 3, 1000);
    long long sum = 0;
    for (const auto& c : r.components) sum += c.params;
    EXPECT_EQ(r.total, sum) << method;
  }
  EXPECT_THROW(parameter_report_from_counts("mystery", 1, 1, 1, 1), std::invalid_argument);
  EXPECT_THROW(parameter_report_from_counts("rodos", 1, 1, 0, 1), std::invalid_argument);
}

TEST(ParamCounts, ClosedFormsMatchMaterializedTensors) {
  const auto ecfg = tiny_cfg();
  EXPECT_EQ(encoder_param_count(ecfg), count_params(init_weights(ecfg, 3)));
  EXPECT_EQ(encoder_param_count(desk_cfg()), 104001);

  MoEConfig moe;
  moe.num_experts = 4;
  moe.expert_dim = 20;
  EXPECT_EQ(moe_param_count(ecfg.hidden, moe),
            count_params(init_moe_weights(ecfg.hidden, moe, 5)));
  MoEConfig desk_moe;  // defaults: 5 experts, expert_dim 128
  EXPECT_EQ(moe_param_count(64, desk_moe), 83841);

  auto backbone = init_weights(ecfg, 1);
  AdapterSpec spec;
  spec.rank = 4;
  spec.targets = default_adapter_targets(ecfg);
  EXPECT_EQ(adapter_lora_count(ecfg, spec), count_adapter_params(spec, backbone));

  EXPECT_EQ(head_param_count(32, 1), 33);
  EXPECT_EQ(head_param_count(32, 5), 165);
}

TEST(ParamCounts, DeskScaleOrderingAcrossMethods) {
  const auto ecfg = desk_cfg();
  EncoderConfig reference = ecfg;  // the larger monolithic analog
  reference.hidden = 128;
  reference.ffn = 256;
  MoEConfig moe;  // 5 experts by default
  AdapterSpec spec;  // rank 12, targets filled from the encoder

  const int n = 5;
  auto arliss = parameter_report("arliss", ecfg, moe, spec, n, reference);
  auto more = parameter_report("more", ecfg, moe, spec, n, reference);
  auto baseline_ref = parameter_report("baseline", reference, moe, spec, n, reference);
  auto rodos = parameter_report("rodos", ecfg, moe, spec, n, reference);

  EXPECT_LT(arliss.total, more.total);
  EXPECT_LT(more.total, baseline_ref.total);
  EXPECT_LT(baseline_ref.total, rodos.total);
  EXPECT_EQ(more.total, 187777);
  EXPECT_NEAR(baseline_ref.percent_of_reference, 100.0, 1e-9);
  // adapters far smaller than models keeps the switching method cheapest
  EXPECT_LT(arliss.total, rodos.total / 3);
}

TEST(AdapterHost, SwapCountingFastPathAndErrors) {
  const auto ecfg = tiny_cfg();
  auto backbone = std::make_shared<NamedTensors>(init_weights(ecfg, 11));
  AdapterHost host(ecfg, backbone);
  auto vocab = build_vocab({"alpha_t0 alpha_r0 bravo_t0 bravo_r0"}, ecfg.vocab_size);

  AdapterSpec spec;
  spec.rank = 2;
  spec.alpha = 4.0f;
  spec.dropout = 0.0f;
  spec.targets = default_adapter_targets(ecfg);
  for (const auto* id : {"a", "b"}) {
    auto w = attach_adapter(*backbone, spec, id[0] == 'a' ? 21 : 22, id);
    for (const auto& target : spec.targets)  // give B nonzero values so ids differ
      for (auto& v : w.B(target)->data) v = id[0] == 'a' ? 0.01f : -0.02f;
    NamedTensors head;
    head["head.weight"] = make_tensor({1, ecfg.hidden});
    for (auto& v : head.at("head.weight")->data) v = id[0] == 'a' ? 0.1f : 0.2f;
    head["head.bias"] = make_tensor({1});
    host.add(id, std::move(w), std::move(head), vocab);
  }

  EXPECT_THROW(host.score_active("alpha_t0", "alpha_r0"), std::runtime_error);  // nothing bound
  EXPECT_GE(host.swap_to("a"), 0.0);
  EXPECT_EQ(host.swap_count(), 1);
  EXPECT_EQ(host.active_id(), "a");
  EXPECT_EQ(host.swap_to("a"), 0.0);  // no-op fast path
  EXPECT_EQ(host.swap_count(), 1);
  host.swap_to("b");
  EXPECT_EQ(host.swap_count(), 2);
  EXPECT_THROW(host.swap_to("zz"), std::runtime_error);
  EXPECT_THROW(host.add("a", AdapterWeights{}, NamedTensors{}, vocab),
               std::invalid_argument);

  // the bound copy scores exactly like a model wired to the same tensors
  host.swap_to("a");
  RewardModel direct;
  direct.cfg = ecfg;
  direct.vocab = vocab;
  direct.backbone = backbone;
  direct.adapter = host.registry().at("a").weights;
  direct.adapter_head = host.registry().at("a").head;
  EXPECT_EQ(host.score_active("alpha_t0", "alpha_r0"),
            model_score(direct, "alpha_t0", "alpha_r0"));

  host.reset_counters();
  EXPECT_EQ(host.swap_count(), 0);
  EXPECT_EQ(host.swap_seconds_total(), 0.0);
}

TEST(Assembly, BaselinePersistenceRoundTripIsExact) {
  testutil::TempDir tmp;
  auto synth = synth_examples(tiny_synth(2, 8, 3, 31));
  auto a = build_assembly("baseline", synth.train, tiny_build(1));
  EXPECT_EQ(a.domains, (std::vector<std::string>{"alpha", "bravo"}));
  EXPECT_EQ(a.training_reports.count("model"), 1u);

  const auto& ex = synth.test.front();
  const float direct = model_score(*a.single, ex.prompt, ex.chosen);
  EXPECT_EQ(assembly_score(a, ex.prompt, ex.chosen).reward, direct);

  const auto mpath = save_assembly(a, tmp.file("baseline"));
  auto b = load_assembly(mpath);
  EXPECT_EQ(b.method, "baseline");
  for (const auto& e : synth.test)
    EXPECT_EQ(model_score(*b.single, e.prompt, e.chosen),
              model_score(*a.single, e.prompt, e.chosen));

  EXPECT_EQ(serialized_param_count(mpath), assembly_parameter_report(a).total);
  EXPECT_EQ(b.training_reports.at("model").epochs.size(),
            a.training_reports.at("model").epochs.size());
}

TEST(Assembly, BaseLoraRoundTripAndAccounting) {
  testutil::TempDir tmp;
  auto synth = synth_examples(tiny_synth(2, 8, 3, 37));
  auto a = build_assembly("base-lora", synth.train, tiny_build(2));
  ASSERT_TRUE(a.single->adapter.has_value());

  const auto mpath = save_assembly(a, tmp.file("base-lora"));
  auto b = load_assembly(mpath);
  for (const auto& e : synth.test)
    EXPECT_EQ(model_score(*b.single, e.prompt, e.rejected),
              model_score(*a.single, e.prompt, e.rejected));
  EXPECT_EQ(serialized_param_count(mpath), assembly_parameter_report(a).total);
}

TEST(Assembly, MoEHeadRoundTripAndAccounting) {
  testutil::TempDir tmp;
  auto synth = synth_examples(tiny_synth(2, 8, 3, 41));
  auto a = build_assembly("more", synth.train, tiny_build(3));
  ASSERT_TRUE(a.single->use_moe);

  const auto mpath = save_assembly(a, tmp.file("more"));
  auto b = load_assembly(mpath);
  for (const auto& e : synth.test)
    EXPECT_EQ(model_score(*b.single, e.prompt, e.chosen),
              model_score(*a.single, e.prompt, e.chosen));
  EXPECT_EQ(serialized_param_count(mpath), assembly_parameter_report(a).total);
}

TEST(Assembly, RodosDispatchTransparencyAndRoundTrip) {
  testutil::TempDir tmp;
  auto synth = synth_examples(tiny_synth(2, 10, 4, 47));
  auto a = build_assembly("rodos", synth.train, tiny_build(4));
  ASSERT_EQ(a.per_domain.size(), 2u);
  EXPECT_EQ(a.training_reports.count("router"), 1u);

  const auto& ex = synth.test.front();
  for (const auto& d : a.domains) {
    auto forced = rodos_score(a, ex.prompt, ex.chosen, d);
    EXPECT_FALSE(forced.routed);
    EXPECT_EQ(forced.reward, model_score(a.per_domain.at(d), ex.prompt, ex.chosen));
  }
  EXPECT_THROW(rodos_score(a, ex.prompt, ex.chosen, "nonexistent"), std::runtime_error);

  auto routed = rodos_score(a, ex.prompt, ex.chosen);
  ASSERT_TRUE(routed.routed);
  float prob_sum = 0;
  for (float p : routed.decision.probabilities) {
    EXPECT_GE(p, 0.0f);
    prob_sum += p;
  }
  EXPECT_NEAR(prob_sum, 1.0f, 1e-6f);
  EXPECT_NE(std::find(a.domains.begin(), a.domains.end(), routed.decision.domain),
            a.domains.end());

  const auto mpath = save_assembly(a, tmp.file("rodos"));
  auto b = load_assembly(mpath);
  for (const auto& e : synth.test) {
    EXPECT_EQ(rodos_score(b, e.prompt, e.chosen).reward,
              rodos_score(a, e.prompt, e.chosen).reward);
    EXPECT_EQ(rodos_score(b, e.prompt, e.chosen).decision.domain,
              rodos_score(a, e.prompt, e.chosen).decision.domain);
  }
  EXPECT_EQ(serialized_param_count(mpath), assembly_parameter_report(a).total);
}

TEST(Assembly, RodosIdenticalModelsMakeRoutingIrrelevant) {
  auto synth = synth_examples(tiny_synth(2, 8, 2, 53));
  auto a = build_assembly("rodos", synth.train, tiny_build(5));
  // overwrite one registry slot with the other model: routing can't matter now
  a.per_domain.at("bravo") = a.per_domain.at("alpha");
  const auto& ex = synth.test.front();
  EXPECT_EQ(rodos_score(a, ex.prompt, ex.chosen, "alpha").reward,
            rodos_score(a, ex.prompt, ex.chosen, "bravo").reward);
  EXPECT_EQ(rodos_score(a, ex.prompt, ex.chosen).reward,
            rodos_score(a, ex.prompt, ex.chosen, "alpha").reward);
}

TEST(Assembly, ArlissSwapBehaviorGroupedPathAndRoundTrip) {
  testutil::TempDir tmp;
  auto synth = synth_examples(tiny_synth(2, 10, 4, 59));
  auto a = build_assembly("arliss", synth.train, tiny_build(6));
  ASSERT_TRUE(a.host);
  ASSERT_TRUE(a.router->adapter.has_value());
  const auto backbone_before = tensor_bytes(*a.host->backbone());

  const auto& ex = synth.test.front();
  a.host->reset_counters();
  auto s1 = arliss_score(a, ex.prompt, ex.chosen, "alpha");
  EXPECT_TRUE(s1.swapped);
  auto s2 = arliss_score(a, ex.prompt, ex.chosen, "alpha");
  EXPECT_FALSE(s2.swapped);  // consecutive same-domain call: no-op fast path
  EXPECT_EQ(s2.swap_seconds, 0.0);
  EXPECT_EQ(s1.reward, s2.reward);
  EXPECT_EQ(a.host->swap_count(), 1);

  // alternating forced domains rebinds on every call ("alpha" is active here)
  a.host->reset_counters();
  for (const auto* d : {"bravo", "alpha", "bravo", "alpha"})
    arliss_score(a, ex.prompt, ex.chosen, d);
  EXPECT_EQ(a.host->swap_count(), 4);

  // the grouped path binds each adapter at most once per batch
  std::vector<std::pair<std::string, std::string>> items;
  for (const auto& e : synth.test) items.push_back({e.prompt, e.chosen});
  a.host->reset_counters();
  auto grouped = arliss_score_grouped(a, items);
  EXPECT_LE(a.host->swap_count(), static_cast<long>(a.domains.size()));
  ASSERT_EQ(grouped.size(), items.size());
  for (size_t i = 0; i < items.size(); ++i) {
    auto single = arliss_score(a, items[i].first, items[i].second);
    EXPECT_EQ(grouped[i].reward, single.reward);
    EXPECT_EQ(grouped[i].decision.domain, single.decision.domain);
  }

  EXPECT_THROW(arliss_score(a, ex.prompt, ex.chosen, "nonexistent"), std::runtime_error);
  EXPECT_EQ(tensor_bytes(*a.host->backbone()), backbone_before);  // scoring never mutates

  const auto mpath = save_assembly(a, tmp.file("arliss"));
  auto b = load_assembly(mpath);
  for (const auto& e : synth.test)
    for (const auto& d : a.domains)
      EXPECT_EQ(arliss_score(b, e.prompt, e.chosen, d).reward,
                arliss_score(a, e.prompt, e.chosen, d).reward);
  EXPECT_EQ(serialized_param_count(mpath), assembly_parameter_report(a).total);
}

TEST(Assembly, ArlissMatchesMergedStandaloneModels) {
  auto synth = synth_examples(tiny_synth(2, 12, 4, 61));
  auto a = build_assembly("arliss", synth.train, tiny_build(7, /*epochs=*/2));

  for (const auto& domain : a.domains) {
    const auto& entry = a.host->registry().at(domain);
    RewardModel merged;
    merged.cfg = a.encoder;
    merged.vocab = entry.vocab;
    auto w = merge_adapter(*a.host->backbone(), entry.weights);
    w["head.weight"] = entry.head.at("head.weight");  // private head replaces the unused one
    w["head.bias"] = entry.head.at("head.bias");
    merged.backbone = std::make_shared<NamedTensors>(std::move(w));

    for (const auto& e : synth.test) {
      const float via_adapter = arliss_score(a, e.prompt, e.chosen, domain).reward;
      const float via_merged = model_score(merged, e.prompt, e.chosen);
      EXPECT_NEAR(via_adapter, via_merged, 1e-5f) << domain;
    }
  }
}

TEST(Assembly, RodosExtensionTrainsOnlyNewDomainAndRouter) {
  testutil::TempDir tmp;
  auto synth2 = synth_examples(tiny_synth(2, 8, 2, 67));
  auto synth3 = synth_examples(tiny_synth(3, 8, 2, 67));  // superset: same per-domain streams
  auto a = build_assembly("rodos", synth2.train, tiny_build(8));

  const auto before_dir = tmp.file("rodos-before");
  save_assembly(a, before_dir);

  EXPECT_THROW(extend_assembly(a, synth2.train), std::invalid_argument);  // nothing new
  {
    auto charlie_only = group_by_domain(synth3.train).at("charlie");
    EXPECT_THROW(extend_assembly(a, charlie_only), std::invalid_argument);  // old data missing
  }

  extend_assembly(a, synth3.train);
  EXPECT_EQ(a.domains, (std::vector<std::string>{"alpha", "bravo", "charlie"}));
  EXPECT_EQ(a.per_domain.size(), 3u);
  EXPECT_EQ(a.router->domains.size(), 3u);
  EXPECT_EQ(a.training_reports.count("model.charlie"), 1u);

  const auto after_dir = tmp.file("rodos-after");
  save_assembly(a, after_dir);
  for (const auto* name : {"model.alpha.ckpt", "model.bravo.ckpt"})
    EXPECT_EQ(file_hash((std::filesystem::path(before_dir) / name).string()),
              file_hash((std::filesystem::path(after_dir) / name).string()))
        << name;
  EXPECT_NE(file_hash((std::filesystem::path(before_dir) / "router.ckpt").string()),
            file_hash((std::filesystem::path(after_dir) / "router.ckpt").string()));
}

TEST(Assembly, ArlissExtensionLeavesBackboneAndOldAdaptersIdentical) {
  testutil::TempDir tmp;
  auto synth2 = synth_examples(tiny_synth(2, 8, 2, 71));
  auto synth3 = synth_examples(tiny_synth(3, 8, 2, 71));
  auto a = build_assembly("arliss", synth2.train, tiny_build(9));

  const auto before_dir = tmp.file("arliss-before");
  save_assembly(a, before_dir);
  extend_assembly(a, synth3.train);
  EXPECT_EQ(a.host->registry().size(), 3u);
  const auto after_dir = tmp.file("arliss-after");
  save_assembly(a, after_dir);

  for (const auto* name : {"backbone.ckpt", "adapter.alpha.ckpt", "adapter.bravo.ckpt"})
    EXPECT_EQ(file_hash((std::filesystem::path(before_dir) / name).string()),
              file_hash((std::filesystem::path(after_dir) / name).string()))
        << name;
  EXPECT_NE(file_hash((std::filesystem::path(before_dir) / "router.ckpt").string()),
            file_hash((std::filesystem::path(after_dir) / "router.ckpt").string()));

  // the new adapter is usable immediately
  const auto& ex = synth3.test.back();
  auto s = arliss_score(a, ex.prompt, ex.chosen, "charlie");
  EXPECT_TRUE(std::isfinite(s.reward));
}

TEST(Assembly, LoadRejectsMissingAndCorruptArtifacts) {
  testutil::TempDir tmp;
  auto synth = synth_examples(tiny_synth(2, 6, 2, 73));
  auto a = build_assembly("baseline", synth.train, tiny_build(10));
  const auto dir = tmp.file("broken");
  const auto mpath = save_assembly(a, dir);

  EXPECT_THROW(load_assembly(tmp.file("nope/assembly.json")), std::runtime_error);

  {  // corrupt a payload byte near the end of the model checkpoint
    const auto ck = (std::filesystem::path(dir) / "model.ckpt").string();
    std::fstream f(ck, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-32, std::ios::end);
    char c;
    f.seekg(f.tellp());
    f.get(c);
    f.seekp(-32, std::ios::end);
    c = static_cast<char>(c ^ 0x5a);
    f.put(c);
    f.close();
    EXPECT_THROW(load_assembly(mpath), std::runtime_error);
  }
  {  // remove the checkpoint entirely
    std::filesystem::remove(std::filesystem::path(dir) / "model.ckpt");
    EXPECT_THROW(load_assembly(mpath), std::runtime_error);
  }
  {  // unparsable manifest
    std::ofstream out(mpath, std::ios::trunc);
    out << "{not json";
    out.close();
    EXPECT_THROW(load_assembly(mpath), std::runtime_error);
  }
}

TEST(Assembly, ShapeInvariantsEnforced) {
  auto synth = synth_examples(tiny_synth(2, 6, 2, 79));
  auto a = build_assembly("rodos", synth.train, tiny_build(12));

  auto broken = a;
  broken.per_domain.erase("alpha");
  EXPECT_THROW(validate_assembly(broken), std::runtime_error);

  broken = a;
  broken.router.reset();
  EXPECT_THROW(validate_assembly(broken), std::runtime_error);

  broken = a;
  broken.domains.push_back("zulu");
  EXPECT_THROW(validate_assembly(broken), std::runtime_error);

  EXPECT_THROW(build_assembly("mystery", synth.train, tiny_build(13)),
               std::invalid_argument);
  EXPECT_THROW(build_assembly("baseline", {}, tiny_build(14)), std::invalid_argument);
}

TEST(Assembly, WorkerThreadCountNeverChangesTrainedWeights) {
  auto synth = synth_examples(tiny_synth(3, 10, 3, 67));

  auto opts = tiny_build(21);
  auto seq = build_assembly("rodos", synth.train, opts);
  opts.jobs = 3;
  auto par = build_assembly("rodos", synth.train, opts);
  for (const auto& d : seq.domains)
    EXPECT_EQ(tensor_bytes(*seq.per_domain.at(d).backbone),
              tensor_bytes(*par.per_domain.at(d).backbone))
        << d;
  EXPECT_EQ(tensor_bytes(*seq.router->backbone), tensor_bytes(*par.router->backbone));
  for (const auto& ex : synth.test)
    EXPECT_EQ(rodos_score(seq, ex.prompt, ex.chosen).reward,
              rodos_score(par, ex.prompt, ex.chosen).reward);

  auto aseq = build_assembly("arliss", synth.train, tiny_build(22));
  auto popts = tiny_build(22);
  popts.jobs = 2;
  auto apar = build_assembly("arliss", synth.train, popts);
  for (const auto& d : aseq.domains) {
    EXPECT_EQ(tensor_bytes(aseq.host->registry().at(d).weights.tensors),
              tensor_bytes(apar.host->registry().at(d).weights.tensors))
        << d;
    EXPECT_EQ(tensor_bytes(aseq.host->registry().at(d).head),
              tensor_bytes(apar.host->registry().at(d).head))
        << d;
  }

  auto bad = tiny_build(23);
  bad.jobs = 0;
  EXPECT_THROW(build_assembly("rodos", synth.train, bad), std::invalid_argument);
}

}  // namespace
}  // namespace rmroute
