#include "diffsat/config.hpp"

#include <fstream>
#include <functional>
#include <map>

#include "diffsat/checkpoint.hpp"
#include "diffsat/errors.hpp"

namespace diffsat {

using nlohmann::json;

Task parse_task(std::string_view s) {
  if (s == "vae") return Task::kVae;
  if (s == "single_image") return Task::kSingleImage;
  if (s == "superres") return Task::kSuperres;
  if (s == "temporal") return Task::kTemporal;
  if (s == "inpaint") return Task::kInpaint;
  throw ConfigError("unknown task '" + std::string(s) +
                    "' (expected vae|single_image|superres|temporal|inpaint)");
}

std::string to_string(Task t) {
  switch (t) {
    case Task::kVae: return "vae";
    case Task::kSingleImage: return "single_image";
    case Task::kSuperres: return "superres";
    case Task::kTemporal: return "temporal";
    case Task::kInpaint: return "inpaint";
  }
  return "?";
}

NoiseSchedule RunConfig::build_noise_schedule() const {
  return build_schedule(num_train_steps, schedule, schedule_opts);
}

void RunConfig::validate() const {
  net.validate();
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (max_iters < 0) throw ConfigError("max_iters must be >= 0");
  if (optim.lr <= 0.0) throw ConfigError("optim.lr must be positive");
  if (!(metadata_dropout >= 0.0 && metadata_dropout <= 1.0))
    throw ConfigError("metadata_dropout must lie in [0, 1]");
  if (!(caption_dropout >= 0.0 && caption_dropout <= 1.0))
    throw ConfigError("caption_dropout must lie in [0, 1]");
  if (sample_steps < 1 || sample_steps > num_train_steps)
    throw ConfigError("sample_steps must lie in [1, num_train_steps]");
  if (!(eta >= 0.0 && eta <= 1.0)) throw ConfigError("eta must lie in [0, 1]");
  if (ckpt_every < 1) throw ConfigError("ckpt_every must be >= 1");
  if (sample_every < 0) throw ConfigError("sample_every must be >= 0");
  if (holdout < 0) throw ConfigError("holdout must be >= 0");
  if (temporal_frames < 1) throw ConfigError("temporal_frames must be >= 1");
  if (control.temporal_kernel.size() != 3) throw ConfigError("control.temporal_kernel needs 3 sizes");
  for (int k : control.temporal_kernel)
    if (k < 1 || k % 2 == 0) throw ConfigError("control.temporal_kernel sizes must be odd");
  if (control.stack_frames && task == Task::kTemporal && control.num_frames != temporal_frames)
    throw ConfigError("stacked temporal control needs control.num_frames == temporal_frames");
}

RunConfig default_run_config(Task task) {
  RunConfig c;
  c.task = task;
  if (task == Task::kVae) {
    c.optim.lr = 5e-4;
    c.batch_size = 8;
  }
  if (task == Task::kSuperres) c.control.frame_channels = 10;
  if (task == Task::kTemporal) c.control.num_frames = c.temporal_frames;
  return c;
}

namespace {

struct Key {
  std::string doc;
  std::function<json(const RunConfig&)> get;
  std::function<void(RunConfig&, const json&)> set;
};

template <typename T>
Key field(T RunConfig::*member, std::string doc) {
  return {std::move(doc), [member](const RunConfig& c) { return json(c.*member); },
          [member](RunConfig& c, const json& v) { c.*member = v.get<T>(); }};
}

template <typename S, typename T>
Key nested(S RunConfig::*outer, T S::*member, std::string doc) {
  return {std::move(doc), [outer, member](const RunConfig& c) { return json(c.*outer.*member); },
          [outer, member](RunConfig& c, const json& v) { c.*outer.*member = v.get<T>(); }};
}

const std::map<std::string, Key>& key_table() {
  static const std::map<std::string, Key> table = [] {
    std::map<std::string, Key> t;
    t["task"] = {"vae | single_image | superres | temporal | inpaint",
                 [](const RunConfig& c) { return json(to_string(c.task)); },
                 [](RunConfig& c, const json& v) { c.task = parse_task(v.get<std::string>()); }};
    t["schedule"] = {"noise schedule: scaled_linear | cosine",
                     [](const RunConfig& c) { return json(to_string(c.schedule)); },
                     [](RunConfig& c, const json& v) {
                       c.schedule = parse_schedule_kind(v.get<std::string>());
                     }};
    t["prediction"] = {"training target: epsilon | sample | velocity",
                       [](const RunConfig& c) { return json(to_string(c.prediction)); },
                       [](RunConfig& c, const json& v) {
                         c.prediction = parse_prediction_mode(v.get<std::string>());
                       }};
    t["corruption"] = {"inpainting corruption: cloud_white | noise | zero",
                       [](const RunConfig& c) { return json(to_string(c.corruption)); },
                       [](RunConfig& c, const json& v) {
                         c.corruption = parse_corruption_kind(v.get<std::string>());
                       }};
    t["num_train_steps"] = field(&RunConfig::num_train_steps, "diffusion steps T");
    t["schedule.beta_start"] = nested(&RunConfig::schedule_opts, &ScheduleOptions::beta_start,
                                      "scaled_linear first beta");
    t["schedule.beta_end"] = nested(&RunConfig::schedule_opts, &ScheduleOptions::beta_end,
                                    "scaled_linear last beta");
    t["schedule.cosine_offset"] =
        nested(&RunConfig::schedule_opts, &ScheduleOptions::cosine_offset, "cosine offset s");
    t["optim.lr"] = nested(&RunConfig::optim, &AdamWOptions::lr, "AdamW learning rate (constant)");
    t["optim.beta1"] = nested(&RunConfig::optim, &AdamWOptions::beta1, "AdamW beta1");
    t["optim.beta2"] = nested(&RunConfig::optim, &AdamWOptions::beta2, "AdamW beta2");
    t["optim.eps"] = nested(&RunConfig::optim, &AdamWOptions::eps, "AdamW epsilon");
    t["optim.weight_decay"] =
        nested(&RunConfig::optim, &AdamWOptions::weight_decay, "AdamW decoupled weight decay");
    t["grad_clip"] = field(&RunConfig::grad_clip, "global gradient-norm clip, <= 0 disables");
    t["batch_size"] = field(&RunConfig::batch_size, "images per iteration");
    t["max_iters"] = field(&RunConfig::max_iters, "total training iterations");
    t["seed"] = field(&RunConfig::seed, "root seed for init, data order, noise and dropout");
    t["metadata_dropout"] =
        field(&RunConfig::metadata_dropout, "probability of the null condition per sample");
    t["caption_dropout"] =
        field(&RunConfig::caption_dropout, "per-segment caption dropout probability");
    t["metadata_in_caption"] =
        field(&RunConfig::metadata_in_caption, "append metadata to captions as text");
    t["sample_steps"] = field(&RunConfig::sample_steps, "DDIM steps for sample grids");
    t["guidance"] = field(&RunConfig::guidance, "classifier-free guidance scale");
    t["eta"] = field(&RunConfig::eta, "DDIM eta");
    t["ckpt_every"] = field(&RunConfig::ckpt_every, "checkpoint interval in iterations");
    t["sample_every"] = field(&RunConfig::sample_every, "sample-grid interval, 0 = end only");
    t["holdout"] = field(&RunConfig::holdout, "trailing manifest records excluded from training");
    t["vae_kl_weight"] = field(&RunConfig::vae_kl_weight, "KL weight of the stage-0 VAE loss");
    t["temporal_frames"] = field(&RunConfig::temporal_frames, "conditioning frames after padding");
    t["superres_frame_gsd"] =
        field(&RunConfig::superres_frame_gsd, "gsd metadata given to low-res control frames");
    return t;
  }();
  return table;
}

template <typename Sub>
void apply_sub(Sub& target, const std::string& key, const std::string& sub, const json& v) {
  json j = target;
  if (!j.contains(sub)) throw ConfigError("unknown config key '" + key + "'");
  j[sub] = v;
  target = j.get<Sub>();
}

void apply_key(RunConfig& c, const std::string& key, const json& v) {
  try {
    if (key.rfind("net.", 0) == 0) return apply_sub(c.net, key, key.substr(4), v);
    if (key.rfind("control.", 0) == 0) return apply_sub(c.control, key, key.substr(8), v);
    const auto& table = key_table();
    auto it = table.find(key);
    if (it == table.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second.set(c, v);
  } catch (const json::exception& e) {
    throw ConfigError("bad value for config key '" + key + "': " + e.what());
  }
}

}  // namespace

json to_json(const RunConfig& c) {
  json j = json::object();
  for (const auto& [k, key] : key_table()) j[k] = key.get(c);
  const json net = c.net, control = c.control;
  for (const auto& [k, v] : net.items()) j["net." + k] = v;
  for (const auto& [k, v] : control.items()) j["control." + k] = v;
  return j;
}

void apply_json(RunConfig& c, const json& flat) {
  if (!flat.is_object()) throw ConfigError("config must be a JSON object of flat keys");
  for (const auto& [k, v] : flat.items()) apply_key(c, k, v);
}

void apply_override(RunConfig& c, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json v = json::parse(raw, nullptr, false);
  if (v.is_discarded()) v = raw;
  apply_key(c, key, v);
}

std::vector<ConfigKeyDoc> config_keys() {
  std::vector<ConfigKeyDoc> out;
  for (const auto& [k, key] : key_table()) out.push_back({k, key.doc});
  const json net = NetworkConfig{}, control = ControlConfig{};
  for (const auto& [k, v] : net.items()) out.push_back({"net." + k, "network shape"});
  for (const auto& [k, v] : control.items()) out.push_back({"control." + k, "control branch shape"});
  return out;
}

RunConfig load_run_config(Task task, const std::filesystem::path& file,
                          const std::vector<std::string>& overrides) {
  RunConfig c = default_run_config(task);
  if (!file.empty()) {
    std::ifstream in(file);
    if (!in) throw DependencyError("cannot open config file " + file.string());
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ConfigError("config file " + file.string() + " is not valid JSON");
    if (j.contains("task") && j["task"] != to_string(task))
      throw ConfigError("config file task " + j["task"].dump() + " does not match --task " +
                        to_string(task));
    apply_json(c, j);
  }
  for (const auto& o : overrides) apply_override(c, o);
  if (c.task != task) throw ConfigError("overrides may not change the task");
  c.validate();
  return c;
}

std::string config_hash(const RunConfig& c) { return sha256_hex(to_json(c).dump()).substr(0, 16); }

}  // namespace diffsat
