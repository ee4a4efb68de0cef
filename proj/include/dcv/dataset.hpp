#ifndef DCV_DATASET_HPP
#define DCV_DATASET_HPP

// Seeded moving-shapes videos and the on-disk frame-directory format.

#include "dcv/video_core.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace dcv {

struct SyntheticVideoSpec {
    Index n_clips = 32;  // training clips
    Index n_val = 8;     // held-out clips
    Index frames = 16;
    Index height = 32;
    Index width = 32;
    double max_velocity = 1.5;  // pixels per frame, per axis
    Index max_objects = 3;
    int frame_rate = 8;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Motif classes; a clip's label is the motif of its largest object.
inline constexpr Index kNumMotifClasses = 3;

struct LabeledClip {
    std::string name;
    VideoClip clip;
    Index label = 0;
    std::uint64_t seed = 0;  // per-clip generator seed
};

struct Dataset {
    std::vector<LabeledClip> train;
    std::vector<LabeledClip> val;
    SyntheticVideoSpec spec;
};

/// Thread count from DCVLAB_THREADS (default 1).
int worker_threads();

/// Renders one clip from its own seed. Pure.
LabeledClip render_synthetic_clip(const SyntheticVideoSpec& spec, std::uint64_t clip_seed, std::string name);

/// Train and val clips use disjoint per-clip seeds; output is independent of the thread count.
Dataset generate_synthetic_dataset(const SyntheticVideoSpec& spec);

/// SHA-256 over all pixel data in split order (hex).
std::string dataset_checksum(const Dataset& data);

// ---- PNG frames -------------------------------------------------------------

/// Writes 8-bit RGB.
void write_png(const std::filesystem::path& path, const VideoClip& clip, Index frame);

/// Reads frames in lexicographic name order. Gray and gray+alpha expand to RGB, alpha is dropped.
/// expected_height/width of 0 accept the size of the first frame.
VideoClip ingest_frame_directory(const std::filesystem::path& dir, Index expected_height = 0,
                                 Index expected_width = 0, int frame_rate = 8);

/// dir/manifest.json plus dir/{train,val}/<clip>/frame_NNNN.png.
void save_dataset(const Dataset& data, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace dcv

#endif  // DCV_DATASET_HPP
