#include "panet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

namespace panet {

template <typename T>
Tensor<T> pairwise_sq_dist(const Tensor<T>& embeddings) {
  if (embeddings.rank() != 2) {
    throw ShapeError("pairwise_sq_dist: expected (B,D), got " + shape_str(embeddings.shape()));
  }
  const std::size_t b = embeddings.dim(0), d = embeddings.dim(1);
  auto e = embeddings.data();
  std::vector<T> sq(b);
  for (std::size_t i = 0; i < b; ++i) {
    T acc = 0;
    for (std::size_t k = 0; k < d; ++k) acc += e[i * d + k] * e[i * d + k];
    sq[i] = acc;
  }
  std::vector<T> out(b * b);
  std::vector<bool> positive(b * b);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      T dot = 0;
      for (std::size_t k = 0; k < d; ++k) dot += e[i * d + k] * e[j * d + k];
      const T v = sq[i] + sq[j] - T(2) * dot;
      positive[i * b + j] = v > T(0);
      out[i * b + j] = std::max(v, T(0));
    }
  }
  auto en = embeddings.node();
  return Tensor<T>::from_op(
      {b, b}, std::move(out), {embeddings},
      [b, d, en, positive = std::move(positive)](std::span<const T> g, std::vector<std::vector<T>>& gin) {
        const auto& ev = en->data;
        for (std::size_t i = 0; i < b; ++i) {
          for (std::size_t j = 0; j < b; ++j) {
            const T gij = g[i * b + j];
            if (gij == T(0) || !positive[i * b + j]) continue;
            for (std::size_t k = 0; k < d; ++k) {
              const T diff = T(2) * (ev[i * d + k] - ev[j * d + k]) * gij;
              gin[0][i * d + k] += diff;
              gin[0][j * d + k] -= diff;
            }
          }
        }
      });
}

TripletBatch semi_hard_mine(std::span<const double> distances, std::span<const std::size_t> labels,
                            double margin) {
  const std::size_t b = labels.size();
  if (distances.size() != b * b) {
    throw ShapeError("semi_hard_mine: " + std::to_string(distances.size()) +
                     " distances for a batch of " + std::to_string(b));
  }
  if (!(margin > 0.0)) throw std::invalid_argument("semi_hard_mine: margin must be positive");
  TripletBatch out;
  out.margin = margin;
  for (std::size_t a = 0; a < b; ++a) {
    bool has_positive = false;
    for (std::size_t p = 0; p < b; ++p) {
      if (p == a || labels[p] != labels[a]) continue;
      has_positive = true;
      const double d1 = distances[a * b + p];
      std::optional<std::size_t> band, hardest;
      for (std::size_t n = 0; n < b; ++n) {
        if (labels[n] == labels[a]) continue;
        const double dn = distances[a * b + n];
        if (!hardest || dn < distances[a * b + *hardest]) hardest = n;
        if (d1 < dn && dn < d1 + margin && (!band || dn < distances[a * b + *band])) band = n;
      }
      if (!hardest) continue;  // no negatives in the batch
      const std::size_t n = band ? *band : *hardest;
      out.triplets.push_back({a, p, n, d1, distances[a * b + n], !band});
      if (!band) ++out.fallback_count;
    }
    if (!has_positive) ++out.skipped_singletons;
  }
  return out;
}

template <typename T>
Tensor<T> triplet_loss(const Tensor<T>& distances, const TripletBatch& batch) {
  if (distances.rank() != 2 || distances.dim(0) != distances.dim(1)) {
    throw ShapeError("triplet_loss: expected a square distance matrix, got " +
                     shape_str(distances.shape()));
  }
  const std::size_t b = distances.dim(0);
  auto dv = distances.data();
  const T margin = static_cast<T>(batch.margin);
  T total = 0;
  std::vector<bool> active(batch.triplets.size());
  for (std::size_t t = 0; t < batch.triplets.size(); ++t) {
    const auto& tr = batch.triplets[t];
    if (tr.anchor >= b || tr.positive >= b || tr.negative >= b) {
      throw std::out_of_range("triplet_loss: triplet index outside the batch");
    }
    const T h = dv[tr.anchor * b + tr.positive] - dv[tr.anchor * b + tr.negative] + margin;
    active[t] = h > T(0);
    if (active[t]) total += h;
  }
  auto triplets = batch.triplets;
  return Tensor<T>::from_op(
      {1}, std::vector<T>{total}, {distances},
      [b, triplets = std::move(triplets), active = std::move(active)](
          std::span<const T> g, std::vector<std::vector<T>>& gin) {
        for (std::size_t t = 0; t < triplets.size(); ++t) {
          if (!active[t]) continue;
          gin[0][triplets[t].anchor * b + triplets[t].positive] += g[0];
          gin[0][triplets[t].anchor * b + triplets[t].negative] -= g[0];
        }
      });
}

double lr_at(std::size_t t, std::size_t total, double lr0, double lr_min) {
  if (total == 0) throw std::invalid_argument("lr_at: total steps must be positive");
  if (t > total) throw std::invalid_argument("lr_at: step beyond schedule");
  if (t == 0) return lr0;
  if (t == total) return lr_min;
  const double progress = static_cast<double>(t) / static_cast<double>(total);
  return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

bool is_decay_exempt(const std::string& name) {
  auto ends_with = [&](std::string_view suffix) {
    return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  return name == "alpha" || name == "beta" || ends_with(".alpha") || ends_with(".beta") ||
         name.find("_ln.") != std::string::npos;
}

template <typename T>
AdamW<T>::AdamW(std::vector<NamedParam<T>> params, AdamWOptions options)
    : params_(std::move(params)), options_(options) {
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor.numel(), 0.0);
    v_.emplace_back(p.tensor.numel(), 0.0);
    decay_.push_back(!is_decay_exempt(p.name));
  }
}

template <typename T>
void AdamW<T>::step(const Gradients<T>& grads, double lr, double weight_decay) {
  std::vector<Tensor<T>> g;
  g.reserve(params_.size());
  for (const auto& p : params_) {
    g.push_back(grads.of(p.tensor));
    for (auto v : g.back().data()) {
      if (!std::isfinite(static_cast<double>(v))) {
        throw NumericError("non-finite gradient for parameter '" + p.name + "'");
      }
    }
  }
  ++step_;
  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto theta = params_[i].tensor.mutable_data();
    auto gd = g[i].data();
    auto& m = m_[i];
    auto& v = v_[i];
    const double shrink = decay_[i] ? 1.0 - lr * weight_decay : 1.0;
    for (std::size_t k = 0; k < theta.size(); ++k) {
      const double gk = gd[k];
      m[k] = options_.beta1 * m[k] + (1.0 - options_.beta1) * gk;
      v[k] = options_.beta2 * v[k] + (1.0 - options_.beta2) * gk * gk;
      const double update = (m[k] / bc1) / (std::sqrt(v[k] / bc2) + options_.eps);
      theta[k] = static_cast<T>(static_cast<double>(theta[k]) * shrink - lr * update);
    }
  }
}

template class AdamW<float>;
template class AdamW<double>;

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.epochs = 50;
  return c;
}

void TrainConfig::validate() const {
  if (!(lr0 > 0.0)) throw std::invalid_argument("lr0 must be positive");
  if (lr_min < 0.0 || lr_min > lr0) throw std::invalid_argument("lr_min must lie in [0, lr0]");
  if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be non-negative");
  if (!(margin > 0.0)) throw std::invalid_argument("margin must be positive");
  if (batch_p < 2) throw std::invalid_argument("batch needs at least 2 identities");
  if (batch_k < 2) throw std::invalid_argument("batch needs at least 2 samples per identity");
  if (epochs == 0 && max_steps == 0) throw std::invalid_argument("epochs must be positive");
}

Dataset load_dataset(const std::vector<ManifestRecord>& records, const std::filesystem::path& base_dir,
                     std::size_t height, std::size_t width) {
  Dataset data;
  std::vector<std::string> ids;
  for (const auto& r : records) ids.push_back(r.id);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  data.identities = ids;
  for (const auto& r : records) {
    const auto label = static_cast<std::size_t>(
        std::lower_bound(ids.begin(), ids.end(), r.id) - ids.begin());
    data.samples.push_back({label, resize(read_ppm(base_dir / r.path), height, width)});
  }
  return data;
}

Tensor<float> stack_images(const std::vector<const Image*>& images) {
  if (images.empty()) throw std::invalid_argument("stack_images: empty batch");
  const auto& first = *images.front();
  std::vector<float> data;
  data.reserve(images.size() * first.pixels.size());
  for (const auto* img : images) {
    if (img->channels != first.channels || img->height != first.height || img->width != first.width) {
      throw ShapeError("stack_images: images differ in size");
    }
    data.insert(data.end(), img->pixels.begin(), img->pixels.end());
  }
  return Tensor<float>({images.size(), first.channels, first.height, first.width}, std::move(data));
}

std::vector<std::size_t> sample_batch(const Dataset& data, std::size_t p, std::size_t k, Rng& rng) {
  std::vector<std::vector<std::size_t>> by_label(data.identities.size());
  for (std::size_t i = 0; i < data.samples.size(); ++i) by_label[data.samples[i].label].push_back(i);
  std::vector<std::size_t> labels;
  for (std::size_t l = 0; l < by_label.size(); ++l) {
    if (!by_label[l].empty()) labels.push_back(l);
  }
  shuffle_in_place(labels, rng);
  labels.resize(std::min(p, labels.size()));
  std::sort(labels.begin(), labels.end());
  std::vector<std::size_t> batch;
  for (auto l : labels) {
    auto pool = by_label[l];
    shuffle_in_place(pool, rng);
    for (std::size_t j = 0; j < k; ++j) batch.push_back(pool[j % pool.size()]);
  }
  return batch;
}

MetricsLog::MetricsLog(const std::filesystem::path& path) : os_(path, std::ios::trunc) {
  if (!os_) throw DataError("cannot write metrics log: " + path.string());
  os_ << kHeader << '\n';
  os_.flush();
}

void MetricsLog::append(const StepMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%zu,%zu,%.9g,%.9g,%.6f,", m.step, m.epoch, m.lr, m.loss,
                m.active_triplet_fraction);
  os_ << buf;
  if (m.eval_accuracy) {
    std::snprintf(buf, sizeof(buf), "%.6f", *m.eval_accuracy);
    os_ << buf;
  }
  os_ << '\n';
  os_.flush();
}

TrainResult train(Backbone<float>& model, const Dataset& data, const TrainConfig& cfg,
                  const EvalFn& evaluate, const StepFn& on_step) {
  cfg.validate();
  if (data.identities.size() < 2) {
    throw DataError("training needs at least 2 identities, got " +
                    std::to_string(data.identities.size()));
  }
  TrainResult result;
  result.steps_per_epoch = std::max<std::size_t>(1, data.samples.size() / cfg.batch_size());
  result.total_steps = cfg.max_steps ? cfg.max_steps : cfg.epochs * result.steps_per_epoch;

  AdamW<float> optimizer(model.params());
  Rng rng = make_rng(cfg.seed, 0x747261696e);
  for (std::size_t step = 1; step <= result.total_steps; ++step) {
    const auto idx = sample_batch(data, cfg.batch_p, cfg.batch_k, rng);
    std::vector<Image> augmented;
    std::vector<const Image*> images;
    std::vector<std::size_t> labels;
    augmented.reserve(idx.size());
    for (auto i : idx) {
      const Sample& s = data.samples[i];
      labels.push_back(s.label);
      if (cfg.online_augment) {
        Image img = s.image;
        if (uniform01(rng) < 0.5) img = augment(img, HFlip{});
        img = augment(img, Brightness{0.8 + 0.4 * uniform01(rng)});
        augmented.push_back(std::move(img));
        images.push_back(&augmented.back());
      } else {
        images.push_back(&s.image);
      }
    }

    auto embeddings = model.forward(stack_images(images));
    auto distances = pairwise_sq_dist(embeddings);
    std::vector<double> dvals(distances.data().begin(), distances.data().end());
    const TripletBatch mined = semi_hard_mine(dvals, labels, cfg.margin);
    auto loss = triplet_loss(distances, mined);
    if (!std::isfinite(loss.item())) {
      throw NumericError("non-finite loss at step " + std::to_string(step));
    }
    std::size_t active = 0;
    for (const auto& t : mined.triplets) {
      if (static_cast<float>(t.d1) - static_cast<float>(t.d2) + static_cast<float>(cfg.margin) > 0.0f) {
        ++active;
      }
    }

    StepMetrics m;
    m.step = step;
    m.epoch = (step - 1) / result.steps_per_epoch + 1;
    m.lr = lr_at(step - 1, result.total_steps, cfg.lr0, cfg.lr_min);
    m.loss = loss.item();
    m.triplets = mined.triplets.size();
    m.fallbacks = mined.fallback_count;
    m.active_triplet_fraction =
        mined.triplets.empty() ? 0.0 : static_cast<double>(active) / static_cast<double>(mined.triplets.size());

    auto grads = backward(loss);
    optimizer.step(grads, m.lr, cfg.weight_decay);

    const bool eval_now =
        evaluate && (step == result.total_steps || (cfg.eval_every && step % cfg.eval_every == 0));
    if (eval_now) m.eval_accuracy = evaluate(model);
    if (on_step) on_step(m);
    result.history.push_back(m);
  }
  return result;
}

template Tensor<float> pairwise_sq_dist(const Tensor<float>&);
template Tensor<double> pairwise_sq_dist(const Tensor<double>&);
template Tensor<long double> pairwise_sq_dist(const Tensor<long double>&);
template Tensor<float> triplet_loss(const Tensor<float>&, const TripletBatch&);
template Tensor<double> triplet_loss(const Tensor<double>&, const TripletBatch&);
template Tensor<long double> triplet_loss(const Tensor<long double>&, const TripletBatch&);

}  // namespace panet
