#include <doctest.h>

#include "pfn/evaluate.hpp"
#include "pfn/train.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>

using namespace pfn;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny(Task task = Task::Depth) {
  TrainConfig c = TrainConfig::defaults(task);
  c.model.scales = 2;
  c.model.shared_channels = 2;
  c.model.private_channels = 4;
  c.model.output_scales = 2;
  c.data.scenes = 3;
  c.data.synth.height = 32;
  c.data.synth.width = 32;
  c.pose_widths = {4, 8};
  c.max_iter = 3;
  c.lr = task == Task::Depth ? 1e-3 : 1e-2;
  if (task == Task::Segmentation) c.model.output_channels = c.data.synth.num_classes;
  return c;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("pfn_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

}  // namespace

TEST_SUITE("learning rate") {
  TEST_CASE("poly schedule") {
    CHECK(poly_lr(0.01, 0, 100) == 0.01);
    CHECK(poly_lr(0.01, 100, 100) == 0.0);
    CHECK(poly_lr(0.01, 150, 100) == 0.0);
    CHECK(std::abs(poly_lr(0.01, 50, 100) - std::pow(0.5, 0.9) * 0.01) < 1e-9);
    CHECK(std::abs(poly_lr(1.0, 1000, 2000) - 0.535886731268146) < 1e-9);
    double prev = 1.0;
    for (int i = 1; i <= 20; ++i) {
      const double v = poly_lr(1.0, i, 20);
      CHECK(v < prev);
      prev = v;
    }
  }
}

TEST_SUITE("segmentation loss") {
  TEST_CASE("uniform logits give ln K") {
    const int k = 5;
    const Tensor<double> logits(Shape{1, k, 4, 4}, 0.0);
    std::vector<int> labels(16);
    for (int i = 0; i < 16; ++i) labels[std::size_t(i)] = i % k;
    const std::vector<Tensor<double>> per_scale{logits};
    const double loss = segmentation_loss<double>(per_scale, labels, 4, 4, 255).value()[0];
    CHECK(loss == doctest::Approx(std::log(double(k))).epsilon(1e-12));
  }

  TEST_CASE("massive true-class logits give near zero loss") {
    std::vector<int> labels{0, 1, 2, 1};
    Tensor<double> logits(Shape{1, 3, 2, 2}, 0.0);
    for (int i = 0; i < 4; ++i) logits.mutable_value()[labels[std::size_t(i)] * 4 + i] = 50.0;
    const std::vector<Tensor<double>> per_scale{logits};
    CHECK(segmentation_loss<double>(per_scale, labels, 2, 2, 255).value()[0] < 1e-3);
  }

  TEST_CASE("equal per-scale losses average to the same value") {
    std::vector<int> labels(64, 1);
    const std::vector<Tensor<double>> one{Tensor<double>(Shape{1, 4, 8, 8}, 0.0)};
    const std::vector<Tensor<double>> two{Tensor<double>(Shape{1, 4, 8, 8}, 0.0), Tensor<double>(Shape{1, 4, 4, 4}, 0.0)};
    const double a = segmentation_loss<double>(one, labels, 8, 8, 255).value()[0];
    const double b = segmentation_loss<double>(two, labels, 8, 8, 255).value()[0];
    CHECK(b == doctest::Approx(a).epsilon(1e-12));
  }

  TEST_CASE("ignored pixels do not contribute and all-ignored is an error") {
    std::vector<int> labels{0, 255, 255, 255};
    Tensor<double> logits(Shape{1, 2, 2, 2}, 0.0);
    logits.mutable_value()[0] = 20.0;  // pixel 0 strongly class 0
    const std::vector<Tensor<double>> per_scale{logits};
    CHECK(segmentation_loss<double>(per_scale, labels, 2, 2, 255).value()[0] < 1e-6);
    std::vector<int> none(4, 255);
    CHECK_THROWS_AS(segmentation_loss<double>(per_scale, none, 2, 2, 255), UsageError);
  }

  TEST_CASE("nearest downsampling picks the covering pixel") {
    std::vector<int> labels{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15};
    const auto d = downsample_labels(labels, 1, 4, 4, 2, 2);
    CHECK(d == std::vector<int>{5, 7, 13, 15});
  }
}

TEST_SUITE("configuration") {
  TEST_CASE("dotted options and type checks") {
    TrainConfig c;
    set_option(c, "model.scales", "3");
    set_option(c, "pose_widths", "8,16,32,64");
    set_option(c, "data.static_camera", "true");
    set_option(c, "model.fusion_inner", "ctc");
    set_option(c, "lr", "2e-3");
    CHECK(c.model.scales == 3);
    CHECK(c.pose_widths == std::vector<int>{8, 16, 32, 64});
    CHECK(c.data.synth.static_camera);
    CHECK(c.model.fusion_inner == FusionMode::CTC);
    CHECK(c.lr == 2e-3);
    CHECK_THROWS_AS(set_option(c, "model.nope", "1"), ConfigError);
    CHECK_THROWS_AS(set_option(c, "model.scales", "three"), ConfigError);
  }

  TEST_CASE("config file with comments") {
    const fs::path dir = scratch("cfgfile");
    std::ofstream(dir / "run.cfg") << "# desk recipe\nmax_iter = 7\n\nmodel.private_channels = 8  # pc\n";
    TrainConfig c;
    apply_config_file(c, dir / "run.cfg");
    CHECK(c.max_iter == 7);
    CHECK(c.model.private_channels == 8);
    std::ofstream(dir / "bad.cfg") << "max_iter = 7\nnot a line\n";
    try {
      apply_config_file(c, dir / "bad.cfg");
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find(":2") != std::string::npos);
    }
  }

  TEST_CASE("json round trip keeps the hash") {
    TrainConfig c = tiny(Task::Segmentation);
    c.model.composition_override = {1, 2};
    const TrainConfig back = train_config_from_json(to_json_string(c));
    CHECK(config_hash(back) == config_hash(c));
    CHECK(back.model == c.model);
  }

  TEST_CASE("validation rejects inconsistent recipes") {
    TrainConfig c = tiny();
    c.data.synth.height = 33;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny();
    c.model.output_activation = OutputActivation::None;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny(Task::Segmentation);
    c.model.output_channels = 3;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny();
    c.lr = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
  }
}

TEST_SUITE("training runs") {
  TEST_CASE("zero iterations leave the initialisation in the checkpoint") {
    TrainConfig c = tiny();
    c.max_iter = 0;
    const fs::path dir = scratch("zero");
    Trainer(c).run(dir);
    const PfnModel<float> loaded = load_model(dir / "checkpoints" / "final");
    const PfnModel<float> fresh(c.model, c.seed);
    REQUIRE(loaded.parameters().size() == fresh.parameters().size());
    for (std::size_t i = 0; i < fresh.parameters().size(); ++i) {
      CHECK(loaded.parameters()[i].name == fresh.parameters()[i].name);
      CHECK((loaded.parameters()[i].tensor.value() == fresh.parameters()[i].tensor.value()).all());
    }
  }

  TEST_CASE("resume reproduces the next step") {
    for (PoseSource ps : {PoseSource::GroundTruth, PoseSource::Learned}) {
      TrainConfig c = tiny();
      c.pose_source = ps;
      const fs::path dir = scratch("resume");
      Trainer a(c);
      a.step();
      a.step();
      a.save_checkpoint(dir);
      const double next = a.step().loss;
      Trainer b = Trainer::resume(dir);
      CHECK(b.iteration() == 2);
      CHECK(std::abs(b.step().loss - next) <= 1e-6);
    }
  }

  TEST_CASE("identical seeds give identical metric logs") {
    const TrainConfig c = tiny();
    const fs::path a = scratch("det_a"), b = scratch("det_b");
    Trainer(c).run(a);
    Trainer(c).run(b);
    const std::string la = slurp(a / "metrics.csv");
    CHECK(la.rfind(metrics_csv_header(Task::Depth), 0) == 0);
    CHECK(std::count(la.begin(), la.end(), '\n') == c.max_iter + 1);
    CHECK(la == slurp(b / "metrics.csv"));
    CHECK(slurp(a / "checkpoints" / "final" / "params.bin") == slurp(b / "checkpoints" / "final" / "params.bin"));
  }

  TEST_CASE("checkpoint round trip is bit-identical") {
    const TrainConfig c = tiny();
    const fs::path dir = scratch("roundtrip");
    Trainer t(c);
    t.step();
    t.save_checkpoint(dir);
    const PfnModel<float> loaded = load_model(dir);
    const FrameTriplet& f = t.data().held_out.front();
    NoGradGuard guard;
    const auto x = t.model().forward(to_tensor<float>(f.target));
    const auto y = loaded.forward(to_tensor<float>(f.target));
    REQUIRE(x.size() == y.size());
    for (std::size_t i = 0; i < x.size(); ++i) CHECK((x[i].value() == y[i].value()).all());

    Trainer u(c);
    u.load_checkpoint(dir);
    for (std::size_t i = 0; i < u.parameters().size(); ++i) {
      CHECK((u.parameters()[i]->adam_m == t.parameters()[i]->adam_m).all());
      CHECK((u.parameters()[i]->adam_v == t.parameters()[i]->adam_v).all());
    }
  }

  TEST_CASE("mismatched checkpoint names the differing fields") {
    const TrainConfig c = tiny();
    const fs::path dir = scratch("mismatch");
    Trainer(c).save_checkpoint(dir);
    TrainConfig other = c;
    other.model.private_channels = 6;
    other.model.kernel = 5;
    Trainer t(other);
    try {
      t.load_checkpoint(dir);
      FAIL("expected CheckpointError");
    } catch (const CheckpointError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("model.private_channels") != std::string::npos);
      CHECK(msg.find("model.kernel") != std::string::npos);
    }
    CHECK_THROWS_AS(evaluate_checkpoint(dir, t.data().held_out, {}, other.model), CheckpointError);
  }

  TEST_CASE("non-finite weights abort with tensor names") {
    Trainer t(tiny());
    Parameter<float>& p = t.model().parameters().front();
    p.tensor.mutable_value()[0] = std::numeric_limits<float>::quiet_NaN();
    try {
      t.step();
      FAIL("expected NonFiniteError");
    } catch (const NonFiniteError& e) {
      CHECK(std::string(e.what()).find(p.name) != std::string::npos);
    }
  }

  TEST_CASE("batch order is a per-epoch permutation") {
    const Trainer t(tiny());
    const std::size_t n = t.data().train.size();
    std::vector<int> seen(n, 0);
    const int per_epoch = int((n + 1) / 2);
    for (int i = 0; i < per_epoch; ++i) {
      for (std::size_t k : t.batch_indices(i)) seen[k]++;
    }
    for (int v : seen) CHECK(v >= 1);
  }

  TEST_CASE("segmentation recipe runs and logs accuracy") {
    TrainConfig c = tiny(Task::Segmentation);
    const fs::path dir = scratch("seg");
    const TrainSummary s = Trainer(c).run(dir);
    CHECK(s.steps == c.max_iter);
    CHECK(std::isfinite(s.final_loss));
    CHECK(slurp(dir / "metrics.csv").rfind(metrics_csv_header(Task::Segmentation), 0) == 0);
    const EvalRun r = evaluate_checkpoint(dir / "checkpoints" / "final", Trainer(c).data().held_out);
    REQUIRE(r.segmentation);
    CHECK(r.segmentation->miou >= 0.0);
    CHECK(r.segmentation->miou <= 1.0);
  }
}

TEST_SUITE("evaluation") {
  TEST_CASE("ground truth as prediction scores perfectly") {
    const TripletData data = load_data(tiny().data);
    for (bool median : {false, true}) {
      EvalOptions o;
      o.median_scaling = median;
      const DepthEvaluation e = evaluate_depth(data.held_out, ground_truth_depth_predictor(), o);
      CHECK(e.mean.abs_rel == doctest::Approx(0.0).epsilon(1e-12));
      CHECK(e.mean.rmse == doctest::Approx(0.0).epsilon(1e-12));
      CHECK(e.mean.delta1 == 1.0);
      REQUIRE(e.temporal);
      // exact depths still differ by the forward motion and at occlusions
      CHECK(e.temporal->trc < 0.05);
    }
  }

  TEST_CASE("constant scale error is removed by median scaling") {
    const TripletData data = load_data(tiny().data);
    const DepthPredictor doubled = [](const FrameTriplet& t, int frame, int& h, int& w) {
      h = t.target.h;
      w = t.target.w;
      return ArrayXd(2.0 * (frame == 0 ? t.gt_depth : t.source_depths[1]));
    };
    EvalOptions raw;
    raw.median_scaling = false;
    CHECK(evaluate_depth(data.held_out, doubled, raw).mean.abs_rel == doctest::Approx(1.0));
    CHECK(evaluate_depth(data.held_out, doubled).mean.abs_rel < 1e-12);
  }

  TEST_CASE("low-resolution predictions are upsampled to ground truth") {
    const TripletData data = load_data(tiny().data);
    const DepthPredictor half = [](const FrameTriplet& t, int, int& h, int& w) {
      h = t.target.h / 2;
      w = t.target.w / 2;
      return ArrayXd::Constant(h * w, 0.5).eval();
    };
    EvalOptions o;
    o.median_scaling = false;
    o.temporal = false;
    const DepthEvaluation e = evaluate_depth(data.held_out, half, o);
    CHECK(e.mean.pixel_count == std::int64_t(data.held_out.size()) * 32 * 32);
    CHECK(std::isfinite(e.mean.abs_rel));
  }

  TEST_CASE("initial checkpoint evaluates to finite metrics and reports") {
    TrainConfig c = tiny();
    c.max_iter = 0;
    const fs::path dir = scratch("eval_init");
    Trainer t(c);
    t.run(dir);
    const EvalRun r = evaluate_checkpoint(dir / "checkpoints" / "final", t.data().held_out);
    REQUIRE(r.depth);
    CHECK(std::isfinite(r.depth->mean.abs_rel));
    CHECK(std::isfinite(r.depth->mean.rmse_log));
    write_eval_report(dir / "eval", r, {});
    CHECK(fs::exists(dir / "eval" / "eval.csv"));
    CHECK(slurp(dir / "eval" / "eval.json").find("\"abs_rel\"") != std::string::npos);
  }

  TEST_CASE("inspect reports graph statistics") {
    PfnConfig c;
    c.scales = 3;
    c.output_scales = 3;
    const std::string table = inspect_table(c);
    CHECK(table.find("fusion blocks        6") != std::string::npos);
    CHECK(inspect_json(c).find("\"sa_count_per_scale\"") != std::string::npos);
    c.scales = 0;
    CHECK_THROWS_AS(inspect_table(c), ConfigError);
  }
}
