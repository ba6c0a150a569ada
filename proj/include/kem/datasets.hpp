#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "kem/tensor.hpp"

namespace kem {

// --- noise-sharing toy -------------------------------------------------------
//
// Three task streams over a shared 8-dim latent z ~ N(0,1): tasks 1 and 2 see
// seeded linear embeddings of z (plus noise of std 0.1) and predict argmax
// over the overlapping windows z[0..3] and z[3..6], so they genuinely share
// structure. Task 3 is pure N(0,1), independent of z, and carries no signal
// at all. Every sample is a pure function of (seed, global sample index).
struct NoiseToyBatch {
    std::size_t batch = 0;
    std::size_t tokens_per_task = 0; // m
    std::size_t width = 0;           // d
    Tensor z;                        // batch x 8
    Tensor task1_tokens;             // {batch, m, d}
    Tensor task2_tokens;             // {batch, m, d}
    Tensor task3_tokens;             // {batch, m, d}
    std::vector<int> labels1;        // argmax of z[0..3], in {0..3}
    std::vector<int> labels2;        // argmax of z[3..6], in {0..3}
};

NoiseToyBatch gen_noise_toy(std::uint64_t seed, std::size_t batch, std::size_t m, std::size_t d,
                            std::size_t first_sample_index = 0);

// --- Sort-of-CLEVR-style relational dataset -----------------------------------

inline constexpr std::size_t kClevrImageSize = 64;
inline constexpr std::size_t kClevrObjectCount = 6;
inline constexpr std::size_t kClevrColorCount = 6;
inline constexpr std::size_t kClevrQuestionBits = 11;
inline constexpr std::size_t kClevrAnswerCount = 10;

enum class ClevrShape : std::uint8_t { Square = 0, Circle = 1 };

struct ClevrObject {
    std::uint8_t color = 0; // unique per image, one object per color
    ClevrShape shape = ClevrShape::Square;
    double cx = 0.0, cy = 0.0; // pixel centers, >= 8 apart pairwise
};

// Question layout (original convention): bits 0..5 one-hot queried color,
// bit 6 non-relational / bit 7 relational family, bits 8..10 one-hot subtype.
//   non-relational subtypes: 0 shape? 1 on the left half? 2 on the top half?
//   relational subtypes:     0 shape of closest, 1 shape of furthest,
//                            2 count of objects sharing the queried shape
// Answer vocabulary: 0 yes, 1 no, 2 square, 3 circle, 4..9 counts 1..6.
struct SortOfClevrSample {
    std::vector<float> image; // 64*64*3 row-major (y, x, channel) in [0,1]
    std::array<ClevrObject, kClevrObjectCount> objects;
    std::array<std::uint8_t, kClevrQuestionBits> question;
    int answer = 0;
};

struct ImbalanceSpec {
    enum class Axis { QuestionColor };
    double exponent = 2.0; // sampling weight for color i is (i+1)^-exponent
    Axis axis = Axis::QuestionColor;
};

std::vector<SortOfClevrSample> gen_sort_of_clevr(std::uint64_t seed, std::size_t count,
                                                 const std::optional<ImbalanceSpec>& imbalance =
                                                     std::nullopt,
                                                 std::size_t first_sample_index = 0);

// Rule oracle; total on any well-formed question over any object list.
int clevr_answer_oracle(const std::array<ClevrObject, kClevrObjectCount>& objects,
                        const std::array<std::uint8_t, kClevrQuestionBits>& question);

// whether the sample's question belongs to the relational family
bool clevr_is_relational(const std::array<std::uint8_t, kClevrQuestionBits>& question);
std::size_t clevr_question_color(const std::array<std::uint8_t, kClevrQuestionBits>& question);

// --- split dumps ---------------------------------------------------------------
//
// One file per split, length-prefixed records, little-endian throughout.
// Clevr record payload: image as 12288 f32, then 6 objects as
// (u8 color, u8 shape, f32 cx, f32 cy), 11 question bytes, 1 answer byte.
// Noise record payload: z as 8 f32, task1/task2/task3 tokens as m*d f32
// each, then label1 and label2 bytes.
void write_clevr_split(const std::filesystem::path& path,
                       const std::vector<SortOfClevrSample>& samples);
std::vector<SortOfClevrSample> read_clevr_split(const std::filesystem::path& path);

void write_noise_split(const std::filesystem::path& path, const NoiseToyBatch& batch);
NoiseToyBatch read_noise_split(const std::filesystem::path& path, std::size_t m, std::size_t d);

// Human-readable companion: seed, counts, imbalance spec, field order notes.
void write_dataset_manifest(const std::filesystem::path& path, std::uint64_t seed,
                            const std::vector<std::pair<std::string, std::size_t>>& split_counts,
                            const std::optional<ImbalanceSpec>& imbalance);

} // namespace kem
