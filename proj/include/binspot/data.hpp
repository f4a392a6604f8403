#pragma once

#include <binspot/tensor.hpp>

#include <cmath>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace binspot {

/// Precomputed T×F feature maps with integer labels.
struct FeatureDataset {
    std::size_t time_steps = 0;
    std::size_t freq_bins = 0;
    std::size_t num_classes = 0;
    std::string split = "train";
    std::vector<Real> features;  // count × T × F
    std::vector<std::size_t> labels;

    std::size_t size() const noexcept { return labels.size(); }
    std::size_t example_size() const noexcept { return time_steps * freq_bins; }

    std::span<const Real> example(std::size_t i) const {
        return std::span<const Real>(features).subspan(i * example_size(), example_size());
    }

    void add(std::span<const Real> x, std::size_t label) {
        detail::require_shape(x.size() == example_size(), "dataset: example size mismatch");
        detail::require(label < num_classes, "dataset: label out of range");
        features.insert(features.end(), x.begin(), x.end());
        labels.push_back(label);
    }

    /// Gathers the listed examples into a B × T × F tensor.
    Tensor batch(std::span<const std::size_t> idx, std::vector<std::size_t>* out_labels = nullptr) const {
        Tensor x({idx.size(), time_steps, freq_bins});
        if (out_labels) out_labels->clear();
        for (std::size_t b = 0; b < idx.size(); ++b) {
            detail::require(idx[b] < size(), "dataset: index out of range");
            const auto src = example(idx[b]);
            std::copy(src.begin(), src.end(), x.data().begin() + static_cast<std::ptrdiff_t>(b * example_size()));
            if (out_labels) out_labels->push_back(labels[idx[b]]);
        }
        return x;
    }

    void validate() const {
        detail::require(num_classes >= 1, "dataset: num_classes must be >= 1");
        detail::require_shape(features.size() == size() * example_size(), "dataset: feature payload size mismatch");
        for (std::size_t l : labels) detail::require(l < num_classes, "dataset: label out of range");
    }
};

/// Synthetic band-pattern task. Class c carries a Gaussian bump centred at
/// frequency bin (c+1)·F/(K+1), amplitude-modulated over time, plus white
/// noise. Values are rounded to float32 so files round-trip exactly.
inline FeatureDataset gen_toy_dataset(std::uint64_t seed, std::size_t num_classes = 4, std::size_t per_class = 200,
                                      std::size_t time_steps = 32, std::size_t freq_bins = 40, Real noise = 0.3) {
    detail::require(per_class >= 1 && num_classes >= 1 && time_steps >= 1 && freq_bins >= 1,
                    "gen_toy_dataset: sizes must be positive");
    detail::require(noise >= 0, "gen_toy_dataset: noise must be >= 0");
    FeatureDataset ds;
    ds.time_steps = time_steps;
    ds.freq_bins = freq_bins;
    ds.num_classes = num_classes;
    std::mt19937_64 rng(seed);
    std::normal_distribution<Real> gauss(0, 1);
    const Real spacing = static_cast<Real>(freq_bins) / static_cast<Real>(num_classes + 1);
    const Real width = std::max<Real>(1, spacing / 4);
    std::vector<Real> x(time_steps * freq_bins);
    for (std::size_t i = 0; i < per_class * num_classes; ++i) {
        const std::size_t c = i % num_classes;
        const Real centre = static_cast<Real>(c + 1) * spacing;
        for (std::size_t t = 0; t < time_steps; ++t) {
            const Real mod = 1 + Real{0.5} * std::sin(2 * std::numbers::pi * static_cast<Real>(t) /
                                                      static_cast<Real>(time_steps));
            for (std::size_t f = 0; f < freq_bins; ++f) {
                const Real d = (static_cast<Real>(f) - centre) / width;
                Real v = mod * std::exp(Real{-0.5} * d * d);
                if (noise > 0) v += noise * gauss(rng);
                x[t * freq_bins + f] = static_cast<Real>(static_cast<float>(v));
            }
        }
        ds.add(x, c);
    }
    return ds;
}

}  // namespace binspot
