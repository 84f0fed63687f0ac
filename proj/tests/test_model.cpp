#include <doctest.h>

#include "pfn/gradcheck.hpp"
#include "pfn/model.hpp"
#include "pfn/ops.hpp"
#include "support.hpp"

#include <cmath>
#include <functional>
#include <limits>

using namespace pfn;
using pfn::test::probe_for;
using pfn::test::random_tensor;
using T = Tensor<double>;
using Model = PfnModel<double>;

namespace {

PfnConfig small_config(int scales, int sc = 2, int pc = 4) {
  PfnConfig c;
  c.scales = scales;
  c.shared_channels = sc;
  c.private_channels = pc;
  c.output_scales = std::min(scales, 3);
  return c;
}

// Literal interpreter of the recursion: f_1 = SA, f_{s+1} = FU(f_s^{n_s} u SA).
struct CountOracle {
  const PfnConfig& c;
  std::vector<int> sa;
  int fu = 0;

  explicit CountOracle(const PfnConfig& cfg) : c(cfg), sa(std::size_t(cfg.scales), 0) {}

  int n(int s) const {
    if (!c.composition_override.empty() && std::size_t(s) <= c.composition_override.size()) {
      return c.composition_override[std::size_t(s - 1)];
    }
    return c.composition;
  }
  void f(int s) {
    if (s == 1) {
      ++sa[0];
      return;
    }
    for (int i = 0; i < n(s - 1); ++i) f(s - 1);
    ++sa[std::size_t(s - 1)];
    ++fu;
  }
  void p() {
    for (int i = 0; i < n(c.scales); ++i) f(c.scales);
  }
};

// Explicit feature DAG built by the same literal recursion; edge weight = conv layers.
struct DepthOracle {
  struct Node {
    std::vector<std::pair<int, int>> in;  // (source node, conv layers)
  };
  const PfnConfig& c;
  std::vector<Node> nodes;
  std::vector<int> sh, pv;  // current node per scale (pv = -1 without private channels)
  std::vector<int> outputs;

  explicit DepthOracle(const PfnConfig& cfg) : c(cfg) {
    const int image = add({});
    for (int s = 1; s <= c.scales; ++s) {
      sh.push_back(s == 1 ? add({{image, 1}}) : add({{sh.back(), 0}}));
      if (c.private_channels > 0) pv.push_back(s == 1 ? add({{image, 1}}) : add({{pv.back(), 0}}));
      else pv.push_back(-1);
    }
    for (int i = 0; i < n(c.scales); ++i) f(c.scales);
    const int conv_out = c.fusion_output == FusionMode::CTC || c.cws_weighted ? 1 : 0;
    std::vector<std::pair<int, int>> heads;
    for (int s = 0; s < c.scales; ++s) {
      heads.push_back({sh[std::size_t(s)], conv_out});
      if (pv[std::size_t(s)] >= 0) heads.push_back({pv[std::size_t(s)], conv_out});
    }
    for (int a = 0; a < c.output_scales; ++a) outputs.push_back(add({{add(heads), 1}}));
  }
  int add(std::vector<std::pair<int, int>> in) {
    nodes.push_back({std::move(in)});
    return int(nodes.size()) - 1;
  }
  int n(int s) const { return c.compositions(s); }
  void sa(int s) {
    const std::size_t i = std::size_t(s - 1);
    std::vector<std::pair<int, int>> in{{sh[i], 1}};
    if (pv[i] >= 0) in.push_back({pv[i], 1});
    const int new_sh = add(in);
    if (pv[i] >= 0) pv[i] = add(in);
    sh[i] = new_sh;
  }
  void f(int s) {
    if (s == 1) {
      sa(1);
      return;
    }
    for (int i = 0; i < n(s - 1); ++i) f(s - 1);
    sa(s);
    const int w = c.fusion_inner == FusionMode::CTC || c.cws_weighted ? 1 : 0;
    std::vector<std::pair<int, int>> in;
    for (int a = 0; a < s; ++a) in.push_back({sh[std::size_t(a)], w});
    for (int a = 0; a < s; ++a) sh[std::size_t(a)] = add(in);
  }
  // Largest shortest distance from the image over all nodes.
  int max_shortest() const {
    std::vector<int> d(nodes.size(), 0);
    int best = 0;
    for (std::size_t i = 1; i < nodes.size(); ++i) {
      int m = std::numeric_limits<int>::max();
      for (auto [src, w] : nodes[i].in) m = std::min(m, d[std::size_t(src)] + w);
      d[i] = m;
      best = std::max(best, m);
    }
    return best;
  }
  int longest() const {
    std::vector<int> d(nodes.size(), 0);
    for (std::size_t i = 1; i < nodes.size(); ++i) {
      for (auto [src, w] : nodes[i].in) d[i] = std::max(d[i], d[std::size_t(src)] + w);
    }
    int best = 0;
    for (int o : outputs) best = std::max(best, d[std::size_t(o)]);
    return best;
  }
};

T image_for(const PfnConfig& c, int h, int w, std::uint64_t seed = 3) {
  return random_tensor<double>(Shape{2, c.input_channels, h, w}, seed, 0.0, 1.0);
}

bool all_finite(const T& t) { return t.value().isFinite().all(); }

}  // namespace

TEST_SUITE("recursion") {
  TEST_CASE("single scale composes the base case twice") {
    Model m(small_config(1), 1);
    const GraphStats st = m.stats();
    CHECK(st.sa_count_per_scale == std::vector<int>{2});
    CHECK(st.fusion_count == 0);
  }

  TEST_CASE("three and five scale counts") {
    const GraphStats s3 = Model(small_config(3), 1).stats();
    CHECK(s3.sa_count_per_scale == std::vector<int>{8, 4, 2});
    CHECK(s3.fusion_count == 6);
    const GraphStats s5 = Model(small_config(5, 1, 1), 1).stats();
    CHECK(s5.sa_count_per_scale == std::vector<int>{32, 16, 8, 4, 2});
    CHECK(s5.fusion_count == 30);
  }

  TEST_CASE("literal interpreter agrees for S in 1..6 and n in 1..3") {
    for (int S = 1; S <= 6; ++S) {
      for (int n = 1; n <= 3; ++n) {
        PfnConfig c = small_config(S, 1, 1);
        c.composition = n;
        CountOracle oracle(c);
        oracle.p();
        const GraphStats st = Model(c, 1).stats();
        CAPTURE(S);
        CAPTURE(n);
        CHECK(st.sa_count_per_scale == oracle.sa);
        CHECK(st.fusion_count == oracle.fu);
        if (n == 2) {
          for (int s = 1; s <= S; ++s) CHECK(oracle.sa[std::size_t(s - 1)] == (1 << (S - s + 1)));
        }
      }
    }
  }

  TEST_CASE("override list changes individual levels") {
    PfnConfig c = small_config(3, 1, 1);
    c.composition_override = {3, 1, 2};
    CountOracle oracle(c);
    oracle.p();
    const GraphStats st = Model(c, 1).stats();
    CHECK(st.sa_count_per_scale == oracle.sa);
    CHECK(st.sa_count_per_scale == std::vector<int>{6, 2, 2});
    c.composition_override = {3, 1};  // n_S falls back to the uniform count
    CHECK(Model(c, 1).stats().sa_count_per_scale == std::vector<int>{6, 2, 2});
    c.composition_override = {1};
    CHECK_THROWS_AS(Model(c, 1), ConfigError);
  }
}

TEST_SUITE("graph stats") {
  TEST_CASE("parameter count by hand for S=2, sc=2, pc=2, k=3") {
    PfnConfig c;
    c.scales = 2;
    c.shared_channels = 2;
    c.private_channels = 2;
    c.output_scales = 2;
    // head 2*(27*2+2) + 6 SA * 2*(36*2+2) + 2 CWS blocks * 2 targets * 4
    // + output CTC 2*(72*4+4) + predictors 2*(36+1)
    const std::int64_t hand = 112 + 888 + 16 + 584 + 74;
    Model m(c, 1);
    CHECK(m.stats().param_count == hand);
    CHECK(analytic_parameter_count(c) == hand);
  }

  TEST_CASE("registry matches closed form across configurations") {
    for (auto inner : {FusionMode::CWS, FusionMode::CTC}) {
      for (auto outer : {FusionMode::CWS, FusionMode::CTC}) {
        for (bool weighted : {true, false}) {
          for (int pc : {0, 3}) {
            PfnConfig c = small_config(3, 2, pc);
            c.fusion_inner = inner;
            c.fusion_output = outer;
            c.cws_weighted = weighted;
            c.composition_override = {1, 2, 3};
            CHECK(Model(c, 1).stats().param_count == analytic_parameter_count(c));
          }
        }
      }
    }
  }

  TEST_CASE("conv depth matches an explicit DAG oracle") {
    for (int S = 1; S <= 5; ++S) {
      for (auto inner : {FusionMode::CWS, FusionMode::CTC}) {
        for (int pc : {0, 2}) {
          PfnConfig c = small_config(S, 1, pc);
          c.fusion_inner = inner;
          c.cws_weighted = pc > 0;
          c.output_scales = 1;
          DepthOracle oracle(c);
          const GraphStats st = Model(c, 1).stats();
          CAPTURE(S);
          CHECK(st.max_conv_depth_input_to_output == oracle.max_shortest());
          CHECK(st.longest_conv_path == oracle.longest());
        }
      }
    }
  }

  TEST_CASE("shortest-path depth grows linearly in the scale count") {
    for (auto [inner, n] : {std::pair{FusionMode::CWS, 2}, std::pair{FusionMode::CTC, 2},
                            std::pair{FusionMode::CWS, 3}}) {
      std::vector<int> depth;
      for (int S = 1; S <= 6; ++S) {
        PfnConfig c = small_config(S, 1, 3);
        c.fusion_inner = inner;
        c.composition = n;
        c.output_scales = 1;
        depth.push_back(Model(c, 1).stats().max_conv_depth_input_to_output);
      }
      const int step = depth[2] - depth[1];
      CHECK(step > 0);
      for (int S = 2; S <= 5; ++S) CHECK(depth[std::size_t(S)] - depth[std::size_t(S - 1)] == step);
    }
  }
}

TEST_SUITE("sa module") {
  TEST_CASE("zero weights with biases 10 and -5") {
    PfnConfig c = small_config(1, 1, 1);
    c.output_scales = 1;
    Model m(c, 1);
    auto& sw = m.parameter("fractal.sa.s1.i000.shared.weight").tensor;
    auto& pw = m.parameter("fractal.sa.s1.i000.private.weight").tensor;
    sw.mutable_value().setZero();
    pw.mutable_value().setZero();
    m.parameter("fractal.sa.s1.i000.shared.bias").tensor.mutable_value().setConstant(10.0);
    m.parameter("fractal.sa.s1.i000.private.bias").tensor.mutable_value().setConstant(-5.0);
    ScaleFeature<double> z{1, random_tensor<double>(Shape{1, 1, 4, 4}, 1),
                           random_tensor<double>(Shape{1, 1, 4, 4}, 2)};
    auto out = m.sa_module(0, z);
    CHECK(out.shared.shape() == Shape{1, 1, 4, 4});
    CHECK(out.priv.shape() == Shape{1, 1, 4, 4});
    CHECK((out.shared.value() == 10.0).all());
    CHECK((out.priv.value() == 0.0).all());
  }

  TEST_CASE("clamp holds after every step under huge biases") {
    PfnConfig c = small_config(3);
    Model m(c, 5);
    for (auto& p : m.parameters()) {
      if (p.name.ends_with(".bias")) p.tensor.mutable_value().setConstant(1e6);
    }
    int checked = 0;
    ForwardOptions<double> opts;
    opts.observer = [&](const GraphStep& step, const FeaturePyramid<double>& pyr) {
      if (step.kind != GraphStep::Kind::SA) return;
      const auto& f = pyr.at_scale(step.scale);
      CHECK(f.shared.value().minCoeff() >= 0.0);
      CHECK(f.shared.value().maxCoeff() <= 1e4);
      CHECK(f.priv.value().minCoeff() >= 0.0);
      CHECK(f.priv.value().maxCoeff() <= 1e4);
      ++checked;
    };
    auto preds = m.forward(image_for(c, 16, 16), opts);
    CHECK(checked == 14);
    for (const auto& p : preds) CHECK(all_finite(p));
  }

  TEST_CASE("channel bookkeeping at every step") {
    PfnConfig c = small_config(3, 3, 5);
    Model m(c, 2);
    ForwardOptions<double> opts;
    opts.observer = [&](const GraphStep&, const FeaturePyramid<double>& pyr) {
      for (const auto& f : pyr.features) {
        CHECK(f.shared.shape().c == 3);
        CHECK(f.priv.shape().c == 5);
        CHECK(f.shared.shape().h == 16 >> (f.scale - 1));
      }
    };
    m.forward(image_for(c, 16, 16), opts);
  }
}

TEST_SUITE("fusion") {
  TEST_CASE("single-source CWS passes its input through") {
    PfnConfig c = small_config(1, 1, 0);
    c.output_scales = 1;
    c.fusion_output = FusionMode::CWS;
    c.output_activation = OutputActivation::None;
    Model m(c, 4);
    CHECK(m.parameter("output.fuse.t1.weight").tensor.value()[0] == 1.0);
    auto& w = m.parameter("output.pred.s1.weight").tensor.mutable_value();
    w.setZero();
    w[4] = 1.0;  // centre tap
    auto pyr = m.build_fractal(m.input_head(image_for(c, 8, 8)));
    auto preds = m.output_head(pyr);
    CHECK((preds[0].value() - pyr.at_scale(1).shared.value()).abs().maxCoeff() == 0.0);
  }

  TEST_CASE("one-hot CWS weights select the target scale's own feature") {
    PfnConfig c = small_config(3, 2, 1);
    Model m(c, 4);
    auto& w = m.parameter("fractal.fuse.l3.i000.t2.weight").tensor.mutable_value();
    w.setZero();
    w.segment(2, 2).setConstant(1.0);  // source 2, both channels
    std::vector<T> in{random_tensor<double>(Shape{1, 2, 8, 8}, 1), random_tensor<double>(Shape{1, 2, 4, 4}, 2),
                      random_tensor<double>(Shape{1, 2, 2, 2}, 3)};
    const int block = [&] {
      for (const auto& s : m.plan()) {
        if (s.kind == GraphStep::Kind::Fusion && s.scale == 3) return s.module;
      }
      return -1;
    }();
    auto out = m.fusion_block(block, in);
    REQUIRE(out.size() == 3);
    CHECK((out[1].value() == in[1].value()).all());
    CHECK(out[0].shape() == Shape{1, 2, 8, 8});
    CHECK(out[2].shape() == Shape{1, 2, 2, 2});
  }

  TEST_CASE("CTC over two scales reaches both sources") {
    PfnConfig c = small_config(2, 2, 1);
    c.fusion_inner = FusionMode::CTC;
    c.output_scales = 1;
    Model m(c, 8);
    std::vector<T> leaves{random_tensor<double>(Shape{1, 2, 6, 6}, 1, 0.2, 1.0),
                          random_tensor<double>(Shape{1, 2, 3, 3}, 2, 0.2, 1.0)};
    for (auto& p : m.parameters()) {
      if (p.name.ends_with(".bias")) p.tensor.mutable_value().setConstant(0.3);
    }
    auto out = m.fusion_block(0, leaves);
    CHECK(out[0].shape().c == 2);
    CHECK(out[1].shape().c == 2);
    const T p0 = probe_for(out[0], 5), p1 = probe_for(out[1], 6);
    auto loss = [&] {
      auto o = m.fusion_block(0, leaves);
      return add(sum_all(mul(o[0], p0)), sum_all(mul(o[1], p1)));
    };
    auto r = check_gradients(leaves, loss);
    CHECK_MESSAGE(r.max_rel_error < 1e-4, r.worst);
    CHECK(leaves[0].grad().abs().maxCoeff() > 0);
    CHECK(leaves[1].grad().abs().maxCoeff() > 0);
  }

  TEST_CASE("all four fusion combinations build and run") {
    struct Combo {
      FusionMode inner, outer;
      bool weighted;
    };
    for (Combo k : {Combo{FusionMode::CWS, FusionMode::CWS, true}, Combo{FusionMode::CTC, FusionMode::CTC, true},
                    Combo{FusionMode::CWS, FusionMode::CTC, true}, Combo{FusionMode::CWS, FusionMode::CTC, false}}) {
      PfnConfig c = small_config(3);
      c.fusion_inner = k.inner;
      c.fusion_output = k.outer;
      c.cws_weighted = k.weighted;
      PfnModel<float> m(c, 11);
      auto preds = m.forward(random_tensor<float>(Shape{1, 3, 16, 16}, 2, 0.0, 1.0));
      REQUIRE(preds.size() == 3);
      for (const auto& p : preds) CHECK(p.value().isFinite().all());
      if (!k.weighted) CHECK_FALSE(m.has_parameter("fractal.fuse.l2.i000.t1.weight"));
    }
  }
}

TEST_SUITE("heads") {
  TEST_CASE("constant image with zero head weights gives act(b) at every level") {
    PfnConfig c = small_config(3, 2, 1);
    Model m(c, 1);
    for (const char* name : {"head.shared", "head.private"}) {
      m.parameter(std::string(name) + ".weight").tensor.mutable_value().setZero();
      m.parameter(std::string(name) + ".bias").tensor.mutable_value().setConstant(0.7);
    }
    T img(Shape{1, 3, 8, 8}, 0.25);
    auto pyr = m.input_head(img);
    for (const auto& f : pyr.features) {
      CHECK((f.shared.value() - 0.7).abs().maxCoeff() < 1e-12);
      CHECK((f.priv.value() - 0.7).abs().maxCoeff() < 1e-12);
    }
  }

  TEST_CASE("pyramid resolutions and divisibility") {
    PfnConfig c = small_config(5, 1, 1);
    Model m(c, 1);
    auto pyr = m.input_head(T(Shape{1, 3, 64, 64}, 0.5));
    std::vector<int> res;
    for (const auto& f : pyr.features) res.push_back(f.shared.shape().h);
    CHECK(res == std::vector<int>{64, 32, 16, 8, 4});
    try {
      m.input_head(T(Shape{1, 3, 63, 63}, 0.5));
      FAIL("expected rejection");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("16") != std::string::npos);
    }
  }

  TEST_CASE("output heads: sigmoid range, scale selection, logits") {
    PfnConfig c = small_config(5, 2, 2);
    c.output_scales = 4;
    PfnModel<float> m(c, 3);
    auto preds = m.forward(random_tensor<float>(Shape{1, 3, 32, 32}, 4, 0.0, 1.0));
    REQUIRE(preds.size() == 4);
    for (int a = 0; a < 4; ++a) {
      CHECK(preds[std::size_t(a)].shape() == Shape{1, 1, 32 >> a, 32 >> a});
      CHECK(preds[std::size_t(a)].value().minCoeff() > 0.0f);
      CHECK(preds[std::size_t(a)].value().maxCoeff() < 1.0f);
    }
    c.output_channels = 5;
    c.output_activation = OutputActivation::None;
    PfnModel<float> seg(c, 3);
    auto logits = seg.forward(random_tensor<float>(Shape{1, 3, 32, 32}, 4, 0.0, 1.0));
    CHECK(logits[0].shape().c == 5);
    CHECK(logits[0].value().minCoeff() < 0.0f);  // no squashing

    c.output_scales = 6;
    CHECK_THROWS_AS(PfnModel<float>(c, 1), ConfigError);
  }
}

TEST_SUITE("forward") {
  TEST_CASE("deterministic and finite") {
    PfnConfig c = small_config(3);
    PfnModel<float> a(c, 9), b(c, 9);
    const auto img = random_tensor<float>(Shape{2, 3, 16, 16}, 1, 0.0, 1.0);
    auto pa = a.forward(img), pa2 = a.forward(img), pb = b.forward(img);
    for (std::size_t i = 0; i < pa.size(); ++i) {
      CHECK((pa[i].value() == pa2[i].value()).all());
      CHECK((pa[i].value() == pb[i].value()).all());
      CHECK(pa[i].value().isFinite().all());
    }
  }

  TEST_CASE("input-head bias receives gradient") {
    PfnConfig c = small_config(3);
    Model m(c, 9);
    auto preds = m.forward(image_for(c, 16, 16));
    mean_all(preds[0]).backward();
    CHECK(m.parameter("head.shared.bias").tensor.grad().abs().maxCoeff() > 0);
  }

  TEST_CASE("cutting any single fusion output leaves input-head gradient") {
    PfnConfig c = small_config(3);
    Model m(c, 9);
    const T img = image_for(c, 16, 16);
    int cuts = 0;
    for (const auto& step : m.plan()) {
      if (step.kind != GraphStep::Kind::Fusion) continue;
      for (int a = 1; a <= step.scale; ++a) {
        ForwardOptions<double> opts;
        opts.detach_fusion_outputs = {{step.module, a}};
        for (auto& p : m.parameters()) p.tensor.zero_grad();
        auto preds = m.forward(img, opts);
        Tensor<double> loss = mean_all(preds[0]);
        for (std::size_t i = 1; i < preds.size(); ++i) loss = add(loss, mean_all(preds[i]));
        loss.backward();
        CHECK(m.parameter("head.shared.weight").tensor.grad().abs().maxCoeff() > 0);
        CHECK(m.parameter("head.private.weight").tensor.grad().abs().maxCoeff() > 0);
        ++cuts;
      }
    }
    CHECK(cuts == 2 * 4 + 2 * 3);
  }

  TEST_CASE("full network gradient matches finite differences") {
    PfnConfig c = small_config(3, 2, 4);
    Model m(c, 21);
    const T img = random_tensor<double>(Shape{1, 3, 16, 16}, 8, 0.0, 1.0);
    // Positive biases keep most units away from the relu kink.
    for (auto& p : m.parameters()) {
      if (p.name.ends_with(".bias")) p.tensor.mutable_value().setConstant(0.05);
    }
    std::vector<T> probes;
    for (const auto& p : m.forward(img)) probes.push_back(probe_for(p, 31 + probes.size()));
    auto loss = [&] {
      auto preds = m.forward(img);
      Tensor<double> l = sum_all(mul(preds[0], probes[0]));
      for (std::size_t i = 1; i < preds.size(); ++i) l = add(l, sum_all(mul(preds[i], probes[i])));
      return l;
    };
    std::vector<T> leaves;
    for (auto& p : m.parameters()) leaves.push_back(p.tensor);
    // Small step keeps the stencil off nearby relu kinks; the floor absorbs
    // cancellation noise on gradients near zero.
    GradCheckOptions opts;
    opts.step = 1e-6;
    opts.floor = 1e-4;
    auto r = check_gradients(leaves, loss, opts);
    MESSAGE("checked " << r.checked << " parameter elements, max rel err " << r.max_rel_error);
    CHECK_MESSAGE(r.max_rel_error < 1e-3, r.worst);
  }
}

TEST_SUITE("init") {
  TEST_CASE("same seed gives identical registry, names are stable") {
    PfnConfig c = small_config(3);
    Model a(c, 42), b(c, 42), d(c, 43);
    REQUIRE(a.parameters().size() == b.parameters().size());
    bool differs = false;
    for (std::size_t i = 0; i < a.parameters().size(); ++i) {
      CHECK(a.parameters()[i].name == b.parameters()[i].name);
      CHECK((a.parameters()[i].tensor.value() == b.parameters()[i].tensor.value()).all());
      differs = differs || !(a.parameters()[i].tensor.value() == d.parameters()[i].tensor.value()).all();
    }
    CHECK(differs);
    CHECK(a.has_parameter("fractal.sa.s1.i007.shared.weight"));
    CHECK_FALSE(a.has_parameter("fractal.sa.s1.i008.shared.weight"));
    CHECK(a.has_parameter("fractal.fuse.l3.i001.t3.weight"));
    CHECK(a.has_parameter("output.fuse.t3.bias"));
    CHECK(a.parameter("head.shared.bias").tensor.value().isZero());
  }

  TEST_CASE("CWS over three sources starts at 1/3") {
    Model m(small_config(3), 1);
    const auto& w = m.parameter("fractal.fuse.l3.i000.t1.weight").tensor;
    CHECK(w.shape() == Shape{3, 2, 1, 1});
    for (Eigen::Index i = 0; i < w.size(); ++i) CHECK(w.value()[i] == doctest::Approx(1.0 / 3.0));
  }

  TEST_CASE("weight variance follows the uniform law") {
    PfnConfig c = small_config(1, 16, 0);
    c.output_scales = 1;
    Model m(c, 77);
    const auto& w = m.parameter("fractal.sa.s1.i000.shared.weight").tensor;
    REQUIRE(w.shape() == Shape{16, 16, 3, 3});
    const double mean = w.value().mean();
    const double var = (w.value() - mean).square().mean();
    const double law = (6.0 / 144.0) / 3.0;
    CHECK(std::abs(var / law - 1.0) < 0.2);
    CHECK(w.value().abs().maxCoeff() <= std::sqrt(6.0 / 144.0));
  }
}
