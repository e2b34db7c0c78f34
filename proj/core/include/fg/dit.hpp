#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fg/tensor.hpp"

namespace fg::dit {

/// How the text / image conditions reach the visual tokens.
///  - cross_attention: per block, self-attention over visual tokens followed by
///    one cross-attention over [text; image] context tokens.
///  - token_concat: per block, one joint attention over [text; image; visual].
/// In both modes the reference latent is channel-concatenated onto the noisy
/// latent before patch embedding (zeros on frames without a reference).
enum class ConditioningMode { cross_attention, token_concat };

std::string to_string(ConditioningMode m);
ConditioningMode conditioning_mode_from_string(const std::string& s);

struct DitConfig {
    std::size_t layers = 8;
    std::size_t hidden = 32;
    std::size_t heads = 4;
    std::size_t mlp_ratio = 2;
    std::size_t latent_channels = 8;
    std::size_t text_dim = 8;
    std::size_t image_dim = 8;
    ConditioningMode mode = ConditioningMode::cross_attention;
    std::uint64_t seed = 0;
    bool zero_init_output = false;

    void validate() const;
};

nlohmann::json to_json(const DitConfig& c);
DitConfig dit_config_from_json(const nlohmann::json& j);

/// Ordered, named weight tensors. Block parameters carry their layer index;
/// embedding, condition projections and the output head have layer -1.
class Parameters {
public:
    struct Entry {
        std::string name;
        Tensor value;
        int layer = -1;
    };

    void add(std::string name, Tensor value, int layer);
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    std::vector<Entry>& entries() noexcept { return entries_; }
    const std::vector<Entry>& entries() const noexcept { return entries_; }
    std::size_t scalar_count() const;

    /// Same names and shapes, all zeros.
    Parameters zeros_like() const;
    void scale(double s);
    /// this += alpha * other (same layout required).
    void add_scaled(double alpha, const Parameters& other);

private:
    std::vector<Entry> entries_;
    std::map<std::string, std::size_t> index_;
};

bool bit_equal(const Parameters& a, const Parameters& b);

using Gradients = Parameters;

/// Text, image and reference conditions for one forward pass.
struct Conditioning {
    TokenSequence text{Modality::text, 1};
    TokenSequence image{Modality::image, 1};
    LatentVideo reference;
};

/// Optional in-place edits applied during the forward pass. Each edit must be
/// additive with a delta that does not depend on the edited values, which is
/// what lets backward treat it as the identity.
struct Interventions {
    /// Visual hidden states [P, D] at the entry of `layer`.
    std::function<void(std::size_t layer, Tensor& visual_hidden)> on_hidden;
    /// Attention values [context_tokens, D] of the conditioning attention at
    /// `layer`; rows [0, M) belong to the text tokens.
    std::function<void(std::size_t layer, Tensor& values)> on_values;
};

struct ForwardOptions {
    bool hooks = false;
    bool record_tape = false;
    const Interventions* interventions = nullptr;
};

/// Per-layer capture.
struct LayerState {
    std::size_t layer = 0;
    /// Visual token features at the block output, [F*H*W, D].
    Tensor visual;
    /// Text token values of the conditioning attention after any edits, [M, D].
    Tensor text_values;
    /// Conditioning-attention logits, [heads, queries, keys]. In cross mode the
    /// queries are the P visual tokens and the keys the M+N context tokens; in
    /// concat mode both axes span all M+N+P tokens.
    Tensor logits;
};

class Tape;
namespace detail {
struct Mat;
}

struct ForwardResult {
    LatentVideo velocity;
    std::vector<LayerState> states;
    std::shared_ptr<const Tape> tape;
};

class Dit {
public:
    /// Deterministic initialization: every parameter uniform in [-1/sqrt(D), 1/sqrt(D)],
    /// drawn from one seeded stream in declaration order.
    explicit Dit(DitConfig config);
    Dit(DitConfig config, Parameters params);

    const DitConfig& config() const noexcept { return config_; }
    Parameters& params() noexcept { return params_; }
    const Parameters& params() const noexcept { return params_; }

    ForwardResult forward(const LatentVideo& z_t, double t, const Conditioning& cond,
                          const ForwardOptions& options = {}) const;

    /// Re-runs blocks [layer, L) from the block inputs recorded in `tape`.
    /// Matches a full forward only while parameters outside blocks >= layer
    /// are unchanged since the tape was recorded.
    ForwardResult forward_from(const std::shared_ptr<const Tape>& tape, std::size_t layer,
                               const ForwardOptions& options = {}) const;

    /// Parameter gradients of sum(d_velocity * velocity) for the taped pass.
    Gradients backward(const std::shared_ptr<const Tape>& tape, const Tensor& d_velocity) const;

    /// P_t and P_v: condition projections into the hidden space.
    std::vector<double> project_text(std::span<const double> token) const;
    std::vector<double> project_image(std::span<const double> token) const;

    /// Value vector that `layer`'s conditioning attention assigns to a hidden-space token.
    std::vector<double> token_value(std::size_t layer, std::span<const double> hidden_token) const;

    /// Name prefix of `layer`'s conditioning attention ("blocks.3.cross_attn").
    std::string conditioning_attention(std::size_t layer) const;

    /// Keys seen by the conditioning attention: M+N (cross) or M+N+P (concat).
    std::size_t key_count(std::size_t text_tokens, std::size_t image_tokens, std::size_t visual_tokens) const;

private:
    void init_parameters();
    ForwardResult run_blocks(std::shared_ptr<Tape> tape, detail::Mat x, std::size_t first_layer,
                             const ForwardOptions& options) const;

    DitConfig config_;
    Parameters params_;
};

/// Sinusoidal timestep embedding of width `dim` (t scaled by 1000).
std::vector<double> timestep_embedding(double t, std::size_t dim);

// ---------------------------------------------------------------------------
// Training.

struct TrainingExample {
    LatentVideo z0;
    LatentVideo z1;
    double t = 0.5;
    Conditioning cond;
};

/// Which parameters a train step may touch: whole blocks listed in `layers`,
/// plus embedding / projection / output parameters when `globals` is set.
struct TrainableMask {
    std::set<std::size_t> layers;
    bool globals = false;

    bool allows(int layer) const;
    static TrainableMask all(std::size_t layers);
};

struct LossAndGradients {
    double loss = 0.0;
    Gradients gradients;
};

/// Mean rectified-flow loss over the batch and its exact parameter gradients.
/// Per-example work runs on up to `threads` workers; the reduction is in
/// example order so the result is independent of the thread count.
LossAndGradients loss_and_gradients(const Dit& model, const std::vector<TrainingExample>& batch,
                                    const Interventions* interventions = nullptr, std::size_t threads = 1);

/// One plain gradient-descent step restricted to `mask`. Returns the batch loss
/// at the pre-update parameters. Parameters outside the mask are never written.
double train_step(Dit& model, const std::vector<TrainingExample>& batch, double lr, const TrainableMask& mask,
                  std::size_t step_index = 0, const Interventions* interventions = nullptr,
                  std::size_t threads = 1);

// ---------------------------------------------------------------------------
// Checkpoints: <dir>/checkpoint.json plus one FGT1 file per parameter.

void save_checkpoint(const Dit& model, const std::filesystem::path& dir);
Dit load_checkpoint(const std::filesystem::path& dir);

}  // namespace fg::dit
