#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "casnet/atlas.hpp"
#include "casnet/diffeo.hpp"
#include "casnet/losses.hpp"
#include "casnet/models.hpp"
#include "casnet/optim.hpp"
#include "casnet/phantom.hpp"
#include "casnet/volume.hpp"

namespace casnet {

// Which subjects of a generated dataset receive the mid-slice artifact.
enum class ArtifactMode { none, test, all };

ArtifactMode parse_artifact_mode(const std::string& s);
std::string to_string(ArtifactMode m);

// Every field is addressable by key in the flat key=value config format and
// overridable from the command line. Defaults: 500 epochs, the documented
// loss-weight table (lambda_i 2->1 and lambda_l 1->2 at epoch 200,
// lambda_g 200, lambda_d 500, lambda_m 200), T = 6, c = 10, 64-cubed grid
// (32-cubed for the fast test scale).
struct TrainConfig {
    // dataset
    int grid = 64; // cubic edge length
    int classes = 10;
    int groups = 4;
    int subjects = 32;
    int test_every = 4;
    int val_every = 0;
    double age_lo = kAgeMin;
    double age_hi = kAgeMax;
    double noise_sd = 0.05;
    double fold_amplitude = 0.03;
    double fold_frequency = 4.0;
    ArtifactMode artifact = ArtifactMode::none;
    // optimization
    int epochs = 500;
    LossWeights weights;
    IntegrationConfig integ;
    double lr_fields = 1e-2;
    double lr_model = 1e-1;
    int batch_size = 0; // 0 = full batch
    std::uint64_t seed = 1;
    int checkpoint_every = 0; // 0 = final checkpoint only
    int infer_steps = 100;
    // paths
    std::string data_dir = "data";
    std::string out_dir = "run";
};

// Throws ConfigError on unknown keys or unparsable values.
void apply_config_kv(TrainConfig& cfg, const std::string& key, const std::string& value);
TrainConfig parse_config_file(const std::string& path);
std::string config_to_text(const TrainConfig& cfg); // every key, fixed order
void validate_config(const TrainConfig& cfg);

struct Subject {
    int id = 0;
    double age = 0.0;
    int group = 0; // age group index under the generating config
    std::uint64_t seed = 0;
    Split split = Split::train;
    ScalarVolume image;
    ProbLabelVolume labels; // one-hot ground truth
};

struct Dataset {
    int c = 0;
    GridSpec grid;
    std::vector<Subject> subjects;

    std::vector<int> rows(Split s) const;
};

// Phantom cohort per config: stratified ages, per-subject seeds, splits by
// index, artifact applied per ArtifactMode.
Dataset build_dataset(const TrainConfig& cfg);

// Directory of VVOL volumes plus a JSON manifest.
void write_dataset(const std::string& dir, const Dataset& d);
Dataset read_dataset(const std::string& dir);

// Everything train() learns. v holds one free velocity field per training
// subject, in training-row order; u_bar is the frozen epoch-mean displacement
// used by the coupling regularizer.
struct ModelState {
    GridSpec grid;
    int c = 0;
    int epoch = 0;
    GlobalAtlas atlas;
    ConditionalParams cond;
    SegModelParams ss;
    MergeParams merge_params;
    std::vector<VectorField> v;
    VectorField u_bar;
};

ModelState init_state(const TrainConfig& cfg, const Dataset& data);

// Checkpoint = directory with a text manifest (class count, feature
// definitions, group count, epoch, model coefficients) plus VVOL fields.
// Byte-identical across reruns for identical state.
void save_checkpoint(const std::string& dir, const ModelState& s);
ModelState load_checkpoint(const std::string& dir);

struct EpochRow {
    int epoch = 0;
    double l_s = 0, l_r = 0, l_c = 0, l_reg = 0, total = 0;
    double gnorm_ss = 0, gnorm_merge = 0, gnorm_q = 0, gnorm_v = 0;
    double lambda_i = 0, lambda_l = 0;
};

std::string epoch_log_header();
std::string epoch_log_line(const EpochRow& r);

struct TrainResult {
    ModelState state;
    std::vector<EpochRow> log;
};

// Full training loop. Per epoch: for every training subject, intensity
// segmentation, conditional atlas for the subject's age group, free-velocity
// deformation, atlas-propagated segmentation, merge, the four losses, one
// optimizer step; at epoch end the global atlas is refreshed with the
// post-step inverse fields and u_bar is rebuilt. Writes config.txt, log.csv,
// timing.csv (wall clock; the only non-deterministic output) and checkpoints
// under out_dir. Throws NumericError naming the subject and epoch if a loss
// goes non-finite.
TrainResult train(const TrainConfig& cfg, const Dataset& data, const std::string& out_dir);

// The same forward/backward the training loop runs, exposed as a
// finite-difference-checkable objective over the parameter blocks
// (ss, merge, q0..q{G-1}, v0..v{N-1}). Mean loss over `positions`
// (training-row indices into data.rows(train)).
class PipelineObjective final : public Objective {
public:
    PipelineObjective(ModelState& state, const TrainConfig& cfg, const Dataset& data,
                      std::vector<int> positions, int epoch);
    ParamSet params() override;
    double value() override;
    void gradient(std::vector<std::vector<double>>& out) override;

private:
    ModelState& state_;
    const TrainConfig& cfg_;
    const Dataset& data_;
    std::vector<int> train_rows_;
    std::vector<FeatureVolume> feats_;
    std::vector<int> positions_;
    int epoch_ = 0;
};

// 8^3 instance conditioned so central differences can resolve every
// coordinate: a probe is only measurable when its gradient clears the
// rounding noise eps*|loss|/step, so the fixture keeps the loss O(1)
// (balanced regularizer weights, small fields), adds a one-signed linear
// ramp to the atlas image so the image term gives every field coordinate
// leverage (a linear field interpolates exactly, so the path stays smooth),
// and points the fields inward at the volume faces so no sampling position
// clamps (clamped positions carry zero positional gradient).
struct GradCheckFixture {
    TrainConfig cfg;
    Dataset data;
    ModelState state;
    std::vector<int> positions; // all training rows
};

GradCheckFixture gradcheck_fixture(std::uint64_t seed);

// 2|P n T| / (|P| + |T|) over voxels labeled k; 1 when both sets are empty.
double dice(const LabelMap& pred, const LabelMap& truth, int k);

// Largest 26-connected component of class k as a fraction of the class's
// voxels; 0 when the class is empty.
double largest_component_fraction(const LabelMap& labels, int k);

// Voxels of class k with a 6-neighbor of another class (boundary-complexity
// proxy).
std::int64_t class_boundary_voxels(const LabelMap& labels, int k);

struct InferenceOutput {
    ProbLabelVolume ss;     // intensity segmenter
    ProbLabelVolume drs;    // atlas labels propagated through the fitted map
    ProbLabelVolume merged;
    DeformationField phi;
};

// Test-time protocol: the segmenter, conditional atlas, and merge layer stay
// frozen; a fresh free velocity field is optimized for cfg.infer_steps steps
// against the subject image and the segmenter's own prediction (no ground
// truth), then the conditional atlas labels are propagated and merged.
InferenceOutput infer_subject(const ModelState& s, const TrainConfig& cfg,
                              const ScalarVolume& image, double age);

struct VariantStats {
    std::string name;
    std::vector<double> class_mean; // tissue classes 1..c-1
    std::vector<double> class_sd;
    double overall = 0.0; // arithmetic mean of class_mean
};

struct EvalReport {
    int n_subjects = 0;
    int c = 0;
    VariantStats ss, drs, merged;
    std::vector<int> ss_absent;     // classes the segmenter never predicts
    double ss_overall_present = 0;  // overall excluding ss_absent
    double jacobian_negative_fraction = 0;
    std::vector<double> lcc_ss;     // per subject, cortical class
    std::vector<double> lcc_drs;
    double wall_seconds = 0;
};

EvalReport evaluate(const ModelState& s, const TrainConfig& cfg, const Dataset& data,
                    Split split);
void write_eval_csv(const EvalReport& r, const std::string& path);
std::string eval_table(const EvalReport& r);

} // namespace casnet
