#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <variant>
#include <vector>

#include "gtok/tensor.hpp"

namespace gtok {

/// Resolved run configuration. Defaults are desk scale: small synthetic
/// corpus, minutes of single-core training. Every artifact a command writes
/// embeds the canonical echo of the configuration that produced it.
struct RunConfig {
    std::uint64_t seed = 0;

    std::int64_t corpus_modes = 8;
    std::int64_t corpus_sequences = 16;
    std::int64_t corpus_holdout = 4;
    std::int64_t corpus_min_frames = 256;

    std::int64_t codebook_size = 256;   // N
    std::int64_t depth = 4;             // D, residual quantization depth
    std::int64_t reduction = 4;         // s, temporal downsampling of the encoder
    std::int64_t latent_dim = 64;       // p
    double beta = 0.25;                 // commitment weight
    double ema_gamma = 0.99;
    std::int64_t reset_period = 64;     // steps between dead-code sweeps
    std::int64_t reset_min_usage = 1;

    std::int64_t prior_width = 256;
    std::int64_t prior_temporal_blocks = 8;
    std::int64_t prior_depth_blocks = 4;
    std::int64_t prior_heads = 4;

    std::int64_t stage1_epochs = 12;
    std::int64_t stage2_epochs = 6;
    std::int64_t feat_epochs = 8;
    std::int64_t batch = 8;
    double lr = 5e-4;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.95;
    double weight_decay = 0.01;

    std::int64_t top_k = 10;
    double beat_sigma = 0.1;
    std::int64_t diversity_segment = 40;
};

namespace config_detail {

struct Field {
    const char* key;
    std::variant<std::int64_t RunConfig::*, double RunConfig::*, std::uint64_t RunConfig::*> member;
};

inline const std::vector<Field>& fields() {
    static const std::vector<Field> f = {
        {"seed", &RunConfig::seed},
        {"corpus.modes", &RunConfig::corpus_modes},
        {"corpus.sequences", &RunConfig::corpus_sequences},
        {"corpus.holdout", &RunConfig::corpus_holdout},
        {"corpus.min_frames", &RunConfig::corpus_min_frames},
        {"model.codebook_size", &RunConfig::codebook_size},
        {"model.depth", &RunConfig::depth},
        {"model.reduction", &RunConfig::reduction},
        {"model.latent_dim", &RunConfig::latent_dim},
        {"model.beta", &RunConfig::beta},
        {"model.ema_gamma", &RunConfig::ema_gamma},
        {"model.reset_period", &RunConfig::reset_period},
        {"model.reset_min_usage", &RunConfig::reset_min_usage},
        {"prior.width", &RunConfig::prior_width},
        {"prior.temporal_blocks", &RunConfig::prior_temporal_blocks},
        {"prior.depth_blocks", &RunConfig::prior_depth_blocks},
        {"prior.heads", &RunConfig::prior_heads},
        {"train.stage1_epochs", &RunConfig::stage1_epochs},
        {"train.stage2_epochs", &RunConfig::stage2_epochs},
        {"train.feat_epochs", &RunConfig::feat_epochs},
        {"train.batch", &RunConfig::batch},
        {"train.lr", &RunConfig::lr},
        {"train.adam_beta1", &RunConfig::adam_beta1},
        {"train.adam_beta2", &RunConfig::adam_beta2},
        {"train.weight_decay", &RunConfig::weight_decay},
        {"sample.top_k", &RunConfig::top_k},
        {"eval.beat_sigma", &RunConfig::beat_sigma},
        {"eval.segment", &RunConfig::diversity_segment},
    };
    return f;
}

inline std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) {
        return "";
    }
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

}  // namespace config_detail

/// Applies one "key=value" assignment. Unknown keys and malformed values are
/// rejected with a diagnostic naming the key.
inline void config_set(RunConfig& cfg, const std::string& key, const std::string& value) {
    for (const auto& f : config_detail::fields()) {
        if (key != f.key) {
            continue;
        }
        const char* s = value.c_str();
        char* end = nullptr;
        if (std::holds_alternative<std::int64_t RunConfig::*>(f.member)) {
            const long long v = std::strtoll(s, &end, 10);
            detail::require(end != s && *end == '\0', "config: bad integer for " + key + ": '" + value + "'");
            cfg.*std::get<std::int64_t RunConfig::*>(f.member) = v;
        } else if (std::holds_alternative<std::uint64_t RunConfig::*>(f.member)) {
            const unsigned long long v = std::strtoull(s, &end, 10);
            detail::require(end != s && *end == '\0', "config: bad integer for " + key + ": '" + value + "'");
            cfg.*std::get<std::uint64_t RunConfig::*>(f.member) = v;
        } else {
            const double v = std::strtod(s, &end);
            detail::require(end != s && *end == '\0', "config: bad number for " + key + ": '" + value + "'");
            cfg.*std::get<double RunConfig::*>(f.member) = v;
        }
        return;
    }
    throw std::invalid_argument("config: unknown key '" + key + "'");
}

/// Parses key=value text: one assignment per line, '#' comments, blank lines
/// ignored.
inline void config_parse(RunConfig& cfg, const std::string& text) {
    std::size_t pos = 0;
    int lineno = 0;
    while (pos <= text.size()) {
        std::size_t nl = text.find('\n', pos);
        if (nl == std::string::npos) {
            nl = text.size();
        }
        std::string line = text.substr(pos, nl - pos);
        pos = nl + 1;
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) {
            line = line.substr(0, hash);
        }
        line = config_detail::trim(line);
        if (line.empty()) {
            if (pos > text.size()) {
                break;
            }
            continue;
        }
        const std::size_t eq = line.find('=');
        detail::require(eq != std::string::npos,
                        "config: line " + std::to_string(lineno) + " is not key=value: '" + line + "'");
        config_set(cfg, config_detail::trim(line.substr(0, eq)), config_detail::trim(line.substr(eq + 1)));
    }
}

/// Applies a list of "key=value" override strings (the --set flags).
inline void config_overrides(RunConfig& cfg, const std::vector<std::string>& sets) {
    for (const std::string& s : sets) {
        const std::size_t eq = s.find('=');
        detail::require(eq != std::string::npos, "config: override is not key=value: '" + s + "'");
        config_set(cfg, config_detail::trim(s.substr(0, eq)), config_detail::trim(s.substr(eq + 1)));
    }
}

/// Canonical echo: every key in registry order, full precision. Parsing the
/// echo reproduces the configuration exactly.
inline std::string config_echo(const RunConfig& cfg) {
    std::string out;
    char buf[64];
    for (const auto& f : config_detail::fields()) {
        out += f.key;
        out += '=';
        if (std::holds_alternative<std::int64_t RunConfig::*>(f.member)) {
            std::snprintf(buf, sizeof(buf), "%lld",
                          static_cast<long long>(cfg.*std::get<std::int64_t RunConfig::*>(f.member)));
        } else if (std::holds_alternative<std::uint64_t RunConfig::*>(f.member)) {
            std::snprintf(buf, sizeof(buf), "%llu",
                          static_cast<unsigned long long>(cfg.*std::get<std::uint64_t RunConfig::*>(f.member)));
        } else {
            std::snprintf(buf, sizeof(buf), "%.17g", cfg.*std::get<double RunConfig::*>(f.member));
        }
        out += buf;
        out += '\n';
    }
    return out;
}

inline void config_validate(const RunConfig& c) {
    detail::require(c.corpus_modes >= 2, "config: corpus.modes must be >= 2");
    detail::require(c.corpus_sequences >= 1 && c.corpus_holdout >= 0 && c.corpus_holdout < c.corpus_sequences,
                    "config: corpus split invalid");
    detail::require(c.codebook_size >= 2, "config: model.codebook_size must be >= 2");
    detail::require(c.depth >= 1, "config: model.depth must be >= 1");
    detail::require(c.reduction == 2 || c.reduction == 4, "config: model.reduction must be 2 or 4");
    detail::require(c.latent_dim >= 1, "config: model.latent_dim must be >= 1");
    detail::require(c.beta >= 0.0 && c.ema_gamma > 0.0 && c.ema_gamma < 1.0, "config: bad vae constants");
    detail::require(c.reset_period >= 1, "config: model.reset_period must be >= 1");
    detail::require(c.prior_width >= 8 && c.prior_width % c.prior_heads == 0,
                    "config: prior.width must be divisible by prior.heads");
    detail::require(c.prior_temporal_blocks >= 1 && c.prior_depth_blocks >= 1, "config: prior depth invalid");
    detail::require(c.stage1_epochs >= 1 && c.stage2_epochs >= 1 && c.feat_epochs >= 1 && c.batch >= 1,
                    "config: train counts invalid");
    detail::require(c.lr > 0.0, "config: train.lr must be positive");
    detail::require(c.top_k >= 1 && c.top_k <= c.codebook_size, "config: sample.top_k out of range");
    detail::require(c.beat_sigma > 0.0 && c.diversity_segment >= 2, "config: eval constants invalid");
}

/// The fields that decide whether two checkpoints can work together.
inline bool config_model_compatible(const RunConfig& a, const RunConfig& b) {
    return a.codebook_size == b.codebook_size && a.depth == b.depth && a.reduction == b.reduction &&
           a.latent_dim == b.latent_dim && a.corpus_modes == b.corpus_modes;
}

}  // namespace gtok
