#include "pfn/config.hpp"

#include <json.hpp>

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace pfn {

using nlohmann::json;

std::string to_string(Task t) { return t == Task::Depth ? "depth" : "segmentation"; }
std::string to_string(PoseSource p) { return p == PoseSource::Learned ? "learned" : "ground_truth"; }
std::string to_string(LrSchedule s) { return s == LrSchedule::Constant ? "constant" : "poly"; }

namespace {

Task parse_task(const std::string& s) {
  if (s == "depth") return Task::Depth;
  if (s == "segmentation") return Task::Segmentation;
  throw ConfigError("task must be depth or segmentation, got '" + s + "'");
}

PoseSource parse_pose_source(const std::string& s) {
  if (s == "learned") return PoseSource::Learned;
  if (s == "ground_truth") return PoseSource::GroundTruth;
  throw ConfigError("pose_source must be learned or ground_truth, got '" + s + "'");
}

LrSchedule parse_schedule(const std::string& s) {
  if (s == "constant") return LrSchedule::Constant;
  if (s == "poly") return LrSchedule::Poly;
  throw ConfigError("schedule must be constant or poly, got '" + s + "'");
}

json model_json(const PfnConfig& m) {
  return {{"scales", m.scales},
          {"composition", m.composition},
          {"composition_override", m.composition_override},
          {"shared_channels", m.shared_channels},
          {"private_channels", m.private_channels},
          {"kernel", m.kernel},
          {"input_channels", m.input_channels},
          {"fusion_inner", to_string(m.fusion_inner)},
          {"fusion_output", to_string(m.fusion_output)},
          {"cws_weighted", m.cws_weighted},
          {"clamp_hi", m.clamp_hi},
          {"output_scales", m.output_scales},
          {"output_channels", m.output_channels},
          {"output_activation", to_string(m.output_activation)}};
}

PfnConfig model_from(const json& j) {
  PfnConfig m;
  m.scales = j.at("scales").get<int>();
  m.composition = j.at("composition").get<int>();
  m.composition_override = j.at("composition_override").get<std::vector<int>>();
  m.shared_channels = j.at("shared_channels").get<int>();
  m.private_channels = j.at("private_channels").get<int>();
  m.kernel = j.at("kernel").get<int>();
  m.input_channels = j.at("input_channels").get<int>();
  m.fusion_inner = parse_fusion_mode(j.at("fusion_inner").get<std::string>());
  m.fusion_output = parse_fusion_mode(j.at("fusion_output").get<std::string>());
  m.cws_weighted = j.at("cws_weighted").get<bool>();
  m.clamp_hi = j.at("clamp_hi").get<double>();
  m.output_scales = j.at("output_scales").get<int>();
  m.output_channels = j.at("output_channels").get<int>();
  m.output_activation = parse_output_activation(j.at("output_activation").get<std::string>());
  return m;
}

json to_json(const TrainConfig& c) {
  const SynthConfig& s = c.data.synth;
  return {{"task", to_string(c.task)},
          {"lr", c.lr},
          {"schedule", to_string(c.schedule)},
          {"poly_power", c.poly_power},
          {"max_iter", c.max_iter},
          {"batch_size", c.batch_size},
          {"grad_clip", c.grad_clip},
          {"seed", c.seed},
          {"checkpoint_every", c.checkpoint_every},
          {"hflip", c.hflip},
          {"ignore_label", c.ignore_label},
          {"pose_source", to_string(c.pose_source)},
          {"pose_widths", c.pose_widths},
          {"model", model_json(c.model)},
          {"loss",
           {{"alpha", c.loss.alpha},
            {"gamma", c.loss.gamma},
            {"min_depth", c.loss.min_depth},
            {"max_depth", c.loss.max_depth},
            {"ssim_window", c.loss.ssim_window}}},
          {"adam", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}},
          {"data",
           {{"path", c.data.path},
            {"scenes", c.data.scenes},
            {"seed", c.data.seed},
            {"height", s.height},
            {"width", s.width},
            {"focal", s.focal},
            {"min_depth", s.min_depth},
            {"max_depth", s.max_depth},
            {"num_classes", s.num_classes},
            {"min_objects", s.min_objects},
            {"max_objects", s.max_objects},
            {"slanted_fraction", s.slanted_fraction},
            {"pitch", s.pitch},
            {"min_speed", s.min_speed},
            {"max_speed", s.max_speed},
            {"random_direction", s.random_direction},
            {"haze_distance", s.haze_distance},
            {"static_camera", s.static_camera}}}};
}

TrainConfig from_json(const json& j) {
  TrainConfig c;
  c.task = parse_task(j.at("task").get<std::string>());
  c.lr = j.at("lr").get<double>();
  c.schedule = parse_schedule(j.at("schedule").get<std::string>());
  c.poly_power = j.at("poly_power").get<double>();
  c.max_iter = j.at("max_iter").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.grad_clip = j.at("grad_clip").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.checkpoint_every = j.at("checkpoint_every").get<int>();
  c.hflip = j.at("hflip").get<bool>();
  c.ignore_label = j.at("ignore_label").get<int>();
  c.pose_source = parse_pose_source(j.at("pose_source").get<std::string>());
  c.pose_widths = j.at("pose_widths").get<std::vector<int>>();
  c.model = model_from(j.at("model"));
  const json& l = j.at("loss");
  c.loss.alpha = l.at("alpha").get<double>();
  c.loss.gamma = l.at("gamma").get<double>();
  c.loss.min_depth = l.at("min_depth").get<double>();
  c.loss.max_depth = l.at("max_depth").get<double>();
  c.loss.ssim_window = l.at("ssim_window").get<int>();
  const json& a = j.at("adam");
  c.adam.beta1 = a.at("beta1").get<double>();
  c.adam.beta2 = a.at("beta2").get<double>();
  c.adam.eps = a.at("eps").get<double>();
  const json& d = j.at("data");
  c.data.path = d.at("path").get<std::string>();
  c.data.scenes = d.at("scenes").get<int>();
  c.data.seed = d.at("seed").get<std::uint64_t>();
  SynthConfig& s = c.data.synth;
  s.height = d.at("height").get<int>();
  s.width = d.at("width").get<int>();
  s.focal = d.at("focal").get<double>();
  s.min_depth = d.at("min_depth").get<double>();
  s.max_depth = d.at("max_depth").get<double>();
  s.num_classes = d.at("num_classes").get<int>();
  s.min_objects = d.at("min_objects").get<int>();
  s.max_objects = d.at("max_objects").get<int>();
  s.slanted_fraction = d.at("slanted_fraction").get<double>();
  s.pitch = d.at("pitch").get<double>();
  s.min_speed = d.at("min_speed").get<double>();
  s.max_speed = d.at("max_speed").get<double>();
  s.random_direction = d.at("random_direction").get<bool>();
  s.haze_distance = d.at("haze_distance").get<double>();
  s.static_camera = d.at("static_camera").get<bool>();
  return c;
}

json parse_value(const json& current, std::string_view key, std::string_view text) {
  const std::string v(text);
  auto fail = [&] { return ConfigError("option " + std::string(key) + ": cannot parse '" + v + "'"); };
  auto parse_int = [&](std::string_view s) {
    long long out = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), out);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw fail();
    return out;
  };
  switch (current.type()) {
    case json::value_t::boolean:
      if (v == "true" || v == "1" || v == "on") return true;
      if (v == "false" || v == "0" || v == "off") return false;
      throw fail();
    case json::value_t::number_integer:
      return parse_int(v);
    case json::value_t::number_unsigned: {
      const long long x = parse_int(v);
      if (x < 0) throw fail();
      return std::uint64_t(x);
    }
    case json::value_t::number_float: {
      std::size_t used = 0;
      double x = 0;
      try {
        x = std::stod(v, &used);
      } catch (const std::exception&) {
        throw fail();
      }
      if (used != v.size()) throw fail();
      return x;
    }
    case json::value_t::array: {
      json out = json::array();
      std::string_view rest = text;
      while (!rest.empty()) {
        const auto comma = rest.find(',');
        out.push_back(parse_int(rest.substr(0, comma)));
        if (comma == std::string_view::npos) break;
        rest.remove_prefix(comma + 1);
      }
      return out;
    }
    default:
      return v;
  }
}

void list_keys(const json& j, const std::string& prefix, std::string& out) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it->is_object()) {
      list_keys(*it, key, out);
      continue;
    }
    std::string value;
    if (it->is_string()) {
      value = it->get<std::string>();
    } else if (it->is_array()) {
      for (std::size_t i = 0; i < it->size(); ++i) value += (i ? "," : "") + (*it)[i].dump();
    } else {
      value = it->dump();
    }
    out += key + " = " + value + "\n";
  }
}

void diff(const json& a, const json& b, const std::string& prefix, std::vector<std::string>& out) {
  for (auto it = a.begin(); it != a.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!b.contains(it.key())) {
      out.push_back(key);
    } else if (it->is_object()) {
      diff(*it, b.at(it.key()), key, out);
    } else if (*it != b.at(it.key())) {
      out.push_back(key);
    }
  }
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

TrainConfig TrainConfig::defaults(Task task) {
  TrainConfig c;
  c.task = task;
  if (task == Task::Segmentation) {
    c.lr = 1e-2;
    c.schedule = LrSchedule::Poly;
    c.hflip = true;
    c.model.output_activation = OutputActivation::None;
    c.model.output_channels = c.data.synth.num_classes;
  }
  return c;
}

void TrainConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("lr must be positive");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (max_iter < 0) throw ConfigError("max_iter must be non-negative");
  if (!(grad_clip > 0)) throw ConfigError("grad_clip must be positive");
  if (!(poly_power > 0)) throw ConfigError("poly_power must be positive");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be non-negative");
  if (data.scenes < 1) throw ConfigError("data.scenes must be at least 1");
  model.validate();
  loss.validate();
  data.synth.validate();
  const int m = model.required_multiple();
  if (data.path.empty() && (data.synth.height % m != 0 || data.synth.width % m != 0)) {
    throw ConfigError("data resolution " + std::to_string(data.synth.height) + "x" + std::to_string(data.synth.width) +
                      " is not a multiple of " + std::to_string(m) + " as " + std::to_string(model.scales) +
                      " scales require");
  }
  if (task == Task::Depth) {
    if (model.output_channels != 1) throw ConfigError("depth task needs model.output_channels = 1");
    if (model.output_activation != OutputActivation::Sigmoid) {
      throw ConfigError("depth task needs model.output_activation = sigmoid");
    }
    if (pose_source == PoseSource::Learned && pose_widths.empty()) throw ConfigError("learned poses need pose_widths");
  } else {
    if (model.output_activation != OutputActivation::None) {
      throw ConfigError("segmentation task needs model.output_activation = none");
    }
    if (model.output_channels != data.synth.num_classes) {
      throw ConfigError("segmentation task needs model.output_channels = data.num_classes (" +
                        std::to_string(data.synth.num_classes) + ")");
    }
  }
}

std::string to_json_string(const TrainConfig& cfg) { return to_json(cfg).dump(2); }

TrainConfig train_config_from_json(std::string_view text) {
  try {
    return from_json(json::parse(text));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config json: ") + e.what());
  }
}

std::string to_json_string(const PfnConfig& cfg) { return model_json(cfg).dump(2); }

PfnConfig pfn_config_from_json(std::string_view text) {
  try {
    return model_from(json::parse(text));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config json: ") + e.what());
  }
}

void set_option(TrainConfig& cfg, std::string_view key, std::string_view value) {
  json j = to_json(cfg);
  json* node = &j;
  std::string_view rest = key;
  while (true) {
    const auto dot = rest.find('.');
    const std::string part(rest.substr(0, dot));
    if (!node->is_object() || !node->contains(part)) {
      throw ConfigError("unknown option '" + std::string(key) + "'");
    }
    node = &(*node)[part];
    if (dot == std::string_view::npos) break;
    rest.remove_prefix(dot + 1);
  }
  if (node->is_object()) throw ConfigError("option '" + std::string(key) + "' is a section, not a value");
  *node = parse_value(*node, key, value);
  cfg = from_json(j);
}

void apply_config_file(TrainConfig& cfg, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path.string() + ":" + std::to_string(number) + ": expected key = value");
    }
    try {
      set_option(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(path.string() + ":" + std::to_string(number) + ": " + e.what());
    }
  }
}

std::string describe_options(const TrainConfig& cfg) {
  std::string out;
  list_keys(to_json(cfg), "", out);
  return out;
}

std::vector<std::string> differing_fields(const PfnConfig& a, const PfnConfig& b) {
  std::vector<std::string> out;
  diff(model_json(a), model_json(b), "model", out);
  return out;
}

std::string config_hash(const TrainConfig& cfg) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : to_json(cfg).dump()) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace pfn
