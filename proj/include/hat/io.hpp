#ifndef HAT_IO_HPP
#define HAT_IO_HPP

// File plumbing: PNG/PPM image I/O, the binary checkpoint format, the raw
// attribution-plane format, and the JSON run configuration.
//
// Checkpoint layout (all integers little-endian u32):
//   "HATC" | version | entry_count | entries...
//   entry: name_len | name bytes | rank | dims... | payload (f32 LE)
// Optimizer state rides along as sibling entries named "adam.m.<param>",
// "adam.v.<param>" and "adam.t", so a checkpoint is a flat name -> tensor map.

#include <string>
#include <vector>

#include "hat/train.hpp"

namespace hat {

// ====== Images ======
//
// Supported on disk: 8-bit RGB or grayscale PNG (non-interlaced) and binary
// PPM (P6, maxval 255).  Loads map bytes to [0,1]; grayscale is replicated to
// three channels.  Saves round to the nearest byte.

Tensor load_image(const std::string& path);  // -> [3, H, W] in [0,1]

// Format picked by extension: .png or .ppm.
void save_image(const Tensor& img, const std::string& path);  // [3, H, W]

// Single [H, W] plane in [0,1] as a grayscale PNG.
void save_gray_png(const Tensor& plane, const std::string& path);

// ====== Raw attribution planes ======
//
// 16-byte header: magic "LAMP", u32 height, u32 width, u32 reserved (zero),
// followed by height*width little-endian f32 values, row-major.

void write_lam_plane(const std::string& path, const Tensor& plane);  // [H, W]
Tensor read_lam_plane(const std::string& path);

// ====== Checkpoints ======

// Payloads are always stored as 32-bit floats regardless of the library's
// compiled precision.
void save_checkpoint(const std::string& path, const ParamTree& params,
                     const AdamState* adam = nullptr);

// The full flat entry map, optimizer entries included.  Throws FormatError on
// anything malformed; nothing partial is ever returned.
ParamTree load_checkpoint(const std::string& path);

struct ApplyReport {
  std::vector<std::string> loaded;          // copied into the target
  std::vector<std::string> skipped_source;  // checkpoint entries left unused
  std::vector<std::string> missing_target;  // target entries left untouched
};

// Copy matching name+shape entries from source into target (which aliases
// the model's storage).  Optimizer ("adam.*") entries are ignored here.
// strict demands a perfect two-way match and throws UsageError listing the
// first ten offenders; non-strict loads the intersection and reports the
// rest, which is how *2 weights seed a *4 model with a fresh upsampler.
ApplyReport apply_checkpoint(ParamTree& target, const ParamTree& source,
                             bool strict);

// Rebuild optimizer state from a loaded checkpoint.  Returns false when the
// checkpoint carries no optimizer entries; throws FormatError when it carries
// a set that does not mirror params.
bool extract_adam(const ParamTree& loaded, const ParamTree& params,
                  AdamState* out);

// ====== Run configuration ======

struct PathsConfig {
  std::string train_hr;          // directory of HR training images
  std::string val_hr;            // directory of HR validation images
  std::string output_dir = "out";

  bool operator==(const PathsConfig&) const = default;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  PathsConfig paths;

  bool operator==(const RunConfig&) const = default;
};

// JSON with three optional objects: "model", "train", "paths".  Missing keys
// fall back to the published defaults; unknown keys and type mismatches are
// ConfigErrors naming the key path.  Model and train invariants are checked
// before returning (the finetune init checkpoint may still arrive as a CLI
// flag, so only that coupling is deferred).
RunConfig parse_config_text(const std::string& text);
RunConfig parse_config(const std::string& path);

// Full round trip: parse_config_text(serialize_config(cfg)) == cfg.
std::string serialize_config(const RunConfig& cfg);

}  // namespace hat

#endif  // HAT_IO_HPP
