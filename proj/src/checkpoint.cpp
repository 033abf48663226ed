// Checkpoint file: "mmfusion-ckpt-v1\n", the metadata length in bytes, "\n",
// metadata JSON, then every tensor as little-endian float64 in index order.

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mmfusion/errors.hpp"
#include "mmfusion/trainer.hpp"

namespace mmfusion::trainer {
namespace {

using json = nlohmann::json;

constexpr const char* kMagic = "mmfusion-ckpt-v1";

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes little-endian hosts");

json nan_to_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
double null_to_nan(const json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},
          {"phase", r.phase},
          {"lr", r.lr},
          {"loss", nan_to_null(r.loss)},
          {"bce", nan_to_null(r.bce)},
          {"alignment", nan_to_null(r.alignment)},
          {"diffusion", nan_to_null(r.diffusion)},
          {"val_accuracy", nan_to_null(r.val_accuracy)},
          {"masked_train_passes", r.masked_train_passes},
          {"train_passes", r.train_passes},
          {"masked_eval_passes", r.masked_eval_passes},
          {"eval_passes", r.eval_passes}};
}

EpochRecord epoch_from_json(const json& j) {
  EpochRecord r;
  r.epoch = j.at("epoch");
  r.phase = j.at("phase");
  r.lr = j.at("lr");
  r.loss = null_to_nan(j.at("loss"));
  r.bce = null_to_nan(j.at("bce"));
  r.alignment = null_to_nan(j.at("alignment"));
  r.diffusion = null_to_nan(j.at("diffusion"));
  r.val_accuracy = null_to_nan(j.at("val_accuracy"));
  r.masked_train_passes = j.at("masked_train_passes");
  r.train_passes = j.at("train_passes");
  r.masked_eval_passes = j.at("masked_eval_passes");
  r.eval_passes = j.at("eval_passes");
  return r;
}

struct Entry {
  std::string name;
  const Tensor* tensor;
};

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  Model& model = const_cast<Model&>(ck.model);
  std::vector<Entry> entries;
  for (const auto& p : parameters(model)) entries.push_back({p.name, p.tensor});
  json adam_steps = json::object();
  for (const auto& [name, slot] : ck.adam) {
    entries.push_back({"adam.m." + name, &slot.m});
    entries.push_back({"adam.v." + name, &slot.v});
    adam_steps[name] = slot.step;
  }

  json index = json::array();
  std::size_t offset = 0;
  for (const auto& e : entries) {
    index.push_back({{"name", e.name}, {"shape", e.tensor->shape}, {"offset", offset}});
    offset += e.tensor->size();
  }
  std::ostringstream rng_state;
  rng_state << ck.rng;
  const cfd::NoiseSchedule& s = ck.model.schedule;
  json meta = {{"model", to_json(ck.model.config)},
               {"train_config", to_json(ck.config)},
               {"schedule", {{"steps", s.steps}, {"beta1", s.beta_first}, {"betaT", s.beta_last},
                             {"alpha_bar", s.alpha_bar}}},
               {"epoch", ck.epoch},
               {"warmed_up", ck.warmed_up},
               {"rng_state", rng_state.str()},
               {"history", json::array()},
               {"best_val_accuracy", nan_to_null(ck.best_val_accuracy)},
               {"best_epoch", ck.best_epoch},
               {"adam_steps", adam_steps},
               {"tensors", index},
               {"payload_doubles", offset}};
  for (const auto& r : ck.history) meta["history"].push_back(to_json(r));
  const std::string text = meta.dump();

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write checkpoint " + tmp.string());
    out << kMagic << '\n' << text.size() << '\n' << text;
    for (const auto& e : entries)
      out.write(reinterpret_cast<const char*>(e.tensor->data.data()),
                static_cast<std::streamsize>(e.tensor->size() * sizeof(double)));
    if (!out) throw ConfigError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open checkpoint " + path.string());
  std::string magic, length_line;
  std::getline(in, magic);
  if (magic != kMagic) throw ParseError(path.string() + " is not a checkpoint (bad header)");
  std::getline(in, length_line);
  std::size_t length = 0;
  try {
    length = std::stoull(length_line);
  } catch (const std::exception&) {
    throw ParseError(path.string() + ": bad metadata length");
  }
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  if (static_cast<std::size_t>(in.gcount()) != length) throw ParseError(path.string() + ": truncated metadata");

  try {
    const json meta = json::parse(text);
    Checkpoint ck;
    ck.config = train_config_from_json(meta.at("train_config"));
    ck.model = init_model(model_config_from_json(meta.at("model")));
    const auto& sched = meta.at("schedule");
    if (sched.at("alpha_bar").get<std::vector<double>>() != ck.model.schedule.alpha_bar)
      throw ParseError(path.string() + ": stored noise schedule does not match its parameters");
    ck.epoch = meta.at("epoch");
    ck.warmed_up = meta.at("warmed_up");
    std::istringstream rng_state(meta.at("rng_state").get<std::string>());
    rng_state >> ck.rng;
    if (!rng_state) throw ParseError(path.string() + ": bad rng state");
    for (const auto& r : meta.at("history")) ck.history.push_back(epoch_from_json(r));
    ck.best_val_accuracy = null_to_nan(meta.at("best_val_accuracy"));
    ck.best_epoch = meta.at("best_epoch");

    const std::size_t total = meta.at("payload_doubles");
    std::vector<double> payload(total);
    in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(total * sizeof(double)));
    if (static_cast<std::size_t>(in.gcount()) != total * sizeof(double))
      throw ParseError(path.string() + ": truncated tensor payload");

    std::map<std::string, std::pair<Shape, std::size_t>> stored;
    for (const auto& t : meta.at("tensors"))
      stored[t.at("name")] = {t.at("shape").get<Shape>(), t.at("offset").get<std::size_t>()};
    const auto fill = [&](const std::string& name, Tensor& dst, const Shape& expected) {
      const auto it = stored.find(name);
      if (it == stored.end()) throw ParseError(path.string() + ": missing tensor " + name);
      if (it->second.first != expected)
        throw ParseError(path.string() + ": tensor " + name + " has shape " + shape_str(it->second.first) +
                         ", expected " + shape_str(expected));
      dst = Tensor(expected);
      std::copy_n(payload.begin() + static_cast<std::ptrdiff_t>(it->second.second), dst.size(), dst.data.begin());
    };
    ParamList params = parameters(ck.model);
    for (auto& p : params) fill(p.name, *p.tensor, p.tensor->shape);
    for (const auto& [name, step] : meta.at("adam_steps").items()) {
      const auto it = std::find_if(params.begin(), params.end(), [&](const ParamRef& p) { return p.name == name; });
      if (it == params.end()) throw ParseError(path.string() + ": optimizer state for unknown tensor " + name);
      AdamSlot& slot = ck.adam[name];
      slot.step = step.get<std::size_t>();
      fill("adam.m." + name, slot.m, it->tensor->shape);
      fill("adam.v." + name, slot.v, it->tensor->shape);
    }
    return ck;
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

}  // namespace mmfusion::trainer
