#include "kem/datasets.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "kem/rng.hpp"

namespace kem {

namespace {

// per-component stream ids for the counter RNG
enum Stream : std::uint64_t {
    kNoiseLatent = 1,
    kNoiseTask1 = 2,
    kNoiseTask2 = 3,
    kNoiseTask3 = 4,
    kNoiseWeights = 5,
    kClevrScene = 6,
    kClevrQuestion = 7,
};

std::uint64_t sample_stream(Stream component, std::size_t index) {
    return (static_cast<std::uint64_t>(component) << 32) + index;
}

int argmax4(const double* v) {
    int best = 0;
    for (int i = 1; i < 4; ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

} // namespace

NoiseToyBatch gen_noise_toy(std::uint64_t seed, std::size_t batch, std::size_t m, std::size_t d,
                            std::size_t first_sample_index) {
    if (m < 2 || d < 2) throw std::invalid_argument("gen_noise_toy: m and d must be >= 2");
    if (batch == 0) throw std::invalid_argument("gen_noise_toy: batch must be >= 1");

    // fixed embedding weights, shared by every sample of the stream
    CounterRng weights_rng(seed, sample_stream(kNoiseWeights, 0));
    const double w_sigma = 1.0 / std::sqrt(8.0);
    const std::vector<double> w1 = weights_rng.normal_vec(8 * m * d, w_sigma);
    const std::vector<double> w2 = weights_rng.normal_vec(8 * m * d, w_sigma);

    NoiseToyBatch out;
    out.batch = batch;
    out.tokens_per_task = m;
    out.width = d;
    std::vector<double> z(batch * 8);
    std::vector<double> t1(batch * m * d), t2(batch * m * d), t3(batch * m * d);
    out.labels1.resize(batch);
    out.labels2.resize(batch);

    for (std::size_t i = 0; i < batch; ++i) {
        const std::size_t global = first_sample_index + i;
        CounterRng z_rng(seed, sample_stream(kNoiseLatent, global));
        for (std::size_t j = 0; j < 8; ++j) z[i * 8 + j] = z_rng.normal();

        out.labels1[i] = argmax4(&z[i * 8]);     // z[0..3]
        out.labels2[i] = argmax4(&z[i * 8 + 3]); // z[3..6]

        CounterRng n1(seed, sample_stream(kNoiseTask1, global));
        CounterRng n2(seed, sample_stream(kNoiseTask2, global));
        CounterRng n3(seed, sample_stream(kNoiseTask3, global));
        for (std::size_t t = 0; t < m * d; ++t) {
            double e1 = 0.0, e2 = 0.0;
            for (std::size_t j = 0; j < 8; ++j) {
                e1 += z[i * 8 + j] * w1[j * m * d + t];
                e2 += z[i * 8 + j] * w2[j * m * d + t];
            }
            t1[i * m * d + t] = e1 + 0.1 * n1.normal();
            t2[i * m * d + t] = e2 + 0.1 * n2.normal();
            t3[i * m * d + t] = n3.normal(); // independent of z
        }
    }

    out.z = Tensor::from_data({batch, 8}, std::move(z));
    out.task1_tokens = Tensor::from_data({batch, m, d}, std::move(t1));
    out.task2_tokens = Tensor::from_data({batch, m, d}, std::move(t2));
    out.task3_tokens = Tensor::from_data({batch, m, d}, std::move(t3));
    return out;
}

// --- Sort-of-CLEVR -------------------------------------------------------------

namespace {

constexpr double kObjectHalfSize = 3.0;
constexpr double kCircleRadius = 3.5;
constexpr std::size_t kPlacementMargin = 5;
constexpr double kMinCenterDistanceSq = 64.0; // centers >= 8 px apart

constexpr float kPalette[kClevrColorCount][3] = {
    {1.0f, 0.0f, 0.0f}, // red
    {0.0f, 1.0f, 0.0f}, // green
    {0.0f, 0.0f, 1.0f}, // blue
    {1.0f, 0.5f, 0.0f}, // orange
    {0.5f, 0.5f, 0.5f}, // gray
    {1.0f, 1.0f, 0.0f}, // yellow
};

void draw_object(std::vector<float>& image, const ClevrObject& obj) {
    const float* rgb = kPalette[obj.color];
    const int lo_y = static_cast<int>(std::floor(obj.cy - kCircleRadius));
    const int hi_y = static_cast<int>(std::ceil(obj.cy + kCircleRadius));
    const int lo_x = static_cast<int>(std::floor(obj.cx - kCircleRadius));
    const int hi_x = static_cast<int>(std::ceil(obj.cx + kCircleRadius));
    for (int y = std::max(0, lo_y); y <= std::min<int>(kClevrImageSize - 1, hi_y); ++y)
        for (int x = std::max(0, lo_x); x <= std::min<int>(kClevrImageSize - 1, hi_x); ++x) {
            bool inside;
            if (obj.shape == ClevrShape::Square) {
                inside = std::fabs(x - obj.cx) <= kObjectHalfSize &&
                         std::fabs(y - obj.cy) <= kObjectHalfSize;
            } else {
                const double dx = x - obj.cx, dy = y - obj.cy;
                inside = dx * dx + dy * dy <= kCircleRadius * kCircleRadius;
            }
            if (inside) {
                float* px = &image[(static_cast<std::size_t>(y) * kClevrImageSize +
                                    static_cast<std::size_t>(x)) *
                                   3];
                px[0] = rgb[0];
                px[1] = rgb[1];
                px[2] = rgb[2];
            }
        }
}

std::size_t sample_color(CounterRng& rng, const std::optional<ImbalanceSpec>& imbalance) {
    if (!imbalance) return rng.below(kClevrColorCount);
    double weights[kClevrColorCount];
    double total = 0.0;
    for (std::size_t i = 0; i < kClevrColorCount; ++i) {
        weights[i] = std::pow(static_cast<double>(i + 1), -imbalance->exponent);
        total += weights[i];
    }
    const double u = rng.uniform() * total;
    double acc = 0.0;
    for (std::size_t i = 0; i < kClevrColorCount; ++i) {
        acc += weights[i];
        if (u < acc) return i;
    }
    return kClevrColorCount - 1;
}

} // namespace

bool clevr_is_relational(const std::array<std::uint8_t, kClevrQuestionBits>& question) {
    if (question[6] + question[7] != 1)
        throw std::invalid_argument("clevr question: exactly one family bit must be set");
    return question[7] == 1;
}

std::size_t clevr_question_color(const std::array<std::uint8_t, kClevrQuestionBits>& question) {
    std::size_t color = kClevrColorCount;
    int set = 0;
    for (std::size_t i = 0; i < kClevrColorCount; ++i)
        if (question[i]) {
            color = i;
            ++set;
        }
    if (set != 1) throw std::invalid_argument("clevr question: exactly one color bit must be set");
    return color;
}

int clevr_answer_oracle(const std::array<ClevrObject, kClevrObjectCount>& objects,
                        const std::array<std::uint8_t, kClevrQuestionBits>& question) {
    const std::size_t color = clevr_question_color(question);
    const bool relational = clevr_is_relational(question);
    std::size_t subtype = 3;
    int set = 0;
    for (std::size_t i = 0; i < 3; ++i)
        if (question[8 + i]) {
            subtype = i;
            ++set;
        }
    if (set != 1) throw std::invalid_argument("clevr question: exactly one subtype bit must be set");

    std::size_t target = kClevrObjectCount;
    for (std::size_t i = 0; i < kClevrObjectCount; ++i)
        if (objects[i].color == color) {
            target = i;
            break;
        }
    if (target == kClevrObjectCount)
        throw std::invalid_argument("clevr question: queried color is missing from the scene");
    const ClevrObject& obj = objects[target];

    const double half = static_cast<double>(kClevrImageSize) / 2.0;
    if (!relational) {
        switch (subtype) {
            case 0: return obj.shape == ClevrShape::Square ? 2 : 3;
            case 1: return obj.cx < half ? 0 : 1;  // on the left half?
            default: return obj.cy < half ? 0 : 1; // on the top half?
        }
    }

    if (subtype == 2) {
        int count = 0;
        for (const auto& other : objects)
            if (other.shape == obj.shape) ++count;
        return 3 + count; // counts 1..6 live at answers 4..9
    }

    std::size_t best = kClevrObjectCount;
    double best_d = subtype == 0 ? 1e18 : -1.0;
    for (std::size_t i = 0; i < kClevrObjectCount; ++i) {
        if (i == target) continue;
        const double dx = objects[i].cx - obj.cx, dy = objects[i].cy - obj.cy;
        const double dist = dx * dx + dy * dy;
        const bool better = subtype == 0 ? dist < best_d : dist > best_d;
        if (better) {
            best_d = dist;
            best = i;
        }
    }
    return objects[best].shape == ClevrShape::Square ? 2 : 3;
}

std::vector<SortOfClevrSample> gen_sort_of_clevr(std::uint64_t seed, std::size_t count,
                                                 const std::optional<ImbalanceSpec>& imbalance,
                                                 std::size_t first_sample_index) {
    if (count == 0) throw std::invalid_argument("gen_sort_of_clevr: count must be >= 1");

    std::vector<SortOfClevrSample> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t global = first_sample_index + i;
        SortOfClevrSample& sample = out[i];

        CounterRng scene_rng(seed, sample_stream(kClevrScene, global));
        for (std::size_t o = 0; o < kClevrObjectCount; ++o) {
            ClevrObject obj;
            obj.color = static_cast<std::uint8_t>(o);
            obj.shape = scene_rng.below(2) == 0 ? ClevrShape::Square : ClevrShape::Circle;
            bool placed = false;
            for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
                obj.cx = static_cast<double>(
                    kPlacementMargin + scene_rng.below(kClevrImageSize - 2 * kPlacementMargin));
                obj.cy = static_cast<double>(
                    kPlacementMargin + scene_rng.below(kClevrImageSize - 2 * kPlacementMargin));
                placed = true;
                for (std::size_t prev = 0; prev < o; ++prev) {
                    const double dx = obj.cx - sample.objects[prev].cx;
                    const double dy = obj.cy - sample.objects[prev].cy;
                    if (dx * dx + dy * dy < kMinCenterDistanceSq) {
                        placed = false;
                        break;
                    }
                }
            }
            if (!placed) throw std::runtime_error("gen_sort_of_clevr: object placement failed");
            sample.objects[o] = obj;
        }

        sample.image.assign(kClevrImageSize * kClevrImageSize * 3, 0.0f);
        for (const auto& obj : sample.objects) draw_object(sample.image, obj);

        CounterRng q_rng(seed, sample_stream(kClevrQuestion, global));
        sample.question.fill(0);
        sample.question[sample_color(q_rng, imbalance)] = 1;
        const bool relational = q_rng.below(2) == 1;
        sample.question[relational ? 7 : 6] = 1;
        sample.question[8 + q_rng.below(3)] = 1;
        sample.answer = clevr_answer_oracle(sample.objects, sample.question);
    }
    return out;
}

// --- split dumps ----------------------------------------------------------------

namespace {

void put_u32(std::string& out, std::uint32_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
    out.push_back(static_cast<char>((v >> 16) & 0xff));
    out.push_back(static_cast<char>((v >> 24) & 0xff));
}

void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

class RecordReader {
public:
    explicit RecordReader(const std::filesystem::path& path) : in_(path, std::ios::binary) {
        if (!in_) throw std::runtime_error("cannot open " + path.string());
    }

    // false at a clean end of file
    bool next(std::string& payload) {
        char len_bytes[4];
        if (!in_.read(len_bytes, 4)) {
            if (in_.gcount() == 0 && in_.eof()) return false;
            throw std::runtime_error("truncated record length prefix");
        }
        const std::uint32_t len = u32(len_bytes);
        payload.resize(len);
        if (!in_.read(payload.data(), static_cast<std::streamsize>(len)))
            throw std::runtime_error("truncated record payload");
        return true;
    }

    static std::uint32_t u32(const char* p) {
        return static_cast<std::uint32_t>(static_cast<unsigned char>(p[0])) |
               static_cast<std::uint32_t>(static_cast<unsigned char>(p[1])) << 8 |
               static_cast<std::uint32_t>(static_cast<unsigned char>(p[2])) << 16 |
               static_cast<std::uint32_t>(static_cast<unsigned char>(p[3])) << 24;
    }

    static float f32(const char* p) { return std::bit_cast<float>(u32(p)); }

private:
    std::ifstream in_;
};

void write_records(const std::filesystem::path& path, const std::vector<std::string>& payloads) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path.string());
    std::string prefix;
    for (const auto& payload : payloads) {
        prefix.clear();
        put_u32(prefix, static_cast<std::uint32_t>(payload.size()));
        out.write(prefix.data(), 4);
        out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    }
}

} // namespace

void write_clevr_split(const std::filesystem::path& path,
                       const std::vector<SortOfClevrSample>& samples) {
    std::vector<std::string> payloads;
    payloads.reserve(samples.size());
    for (const auto& s : samples) {
        std::string p;
        p.reserve(s.image.size() * 4 + kClevrObjectCount * 10 + kClevrQuestionBits + 1);
        for (const float v : s.image) put_f32(p, v);
        for (const auto& obj : s.objects) {
            p.push_back(static_cast<char>(obj.color));
            p.push_back(static_cast<char>(obj.shape));
            put_f32(p, static_cast<float>(obj.cx));
            put_f32(p, static_cast<float>(obj.cy));
        }
        for (const auto b : s.question) p.push_back(static_cast<char>(b));
        p.push_back(static_cast<char>(s.answer));
        payloads.push_back(std::move(p));
    }
    write_records(path, payloads);
}

std::vector<SortOfClevrSample> read_clevr_split(const std::filesystem::path& path) {
    const std::size_t image_bytes = kClevrImageSize * kClevrImageSize * 3 * 4;
    const std::size_t expected = image_bytes + kClevrObjectCount * 10 + kClevrQuestionBits + 1;

    std::vector<SortOfClevrSample> out;
    RecordReader reader(path);
    std::string payload;
    while (reader.next(payload)) {
        if (payload.size() != expected)
            throw std::runtime_error("clevr record has " + std::to_string(payload.size()) +
                                     " bytes, expected " + std::to_string(expected));
        SortOfClevrSample s;
        const char* p = payload.data();
        s.image.resize(kClevrImageSize * kClevrImageSize * 3);
        for (auto& v : s.image) {
            v = RecordReader::f32(p);
            p += 4;
        }
        for (auto& obj : s.objects) {
            obj.color = static_cast<std::uint8_t>(*p++);
            obj.shape = static_cast<ClevrShape>(*p++);
            obj.cx = RecordReader::f32(p);
            p += 4;
            obj.cy = RecordReader::f32(p);
            p += 4;
        }
        for (auto& b : s.question) b = static_cast<std::uint8_t>(*p++);
        s.answer = static_cast<int>(static_cast<unsigned char>(*p++));
        out.push_back(std::move(s));
    }
    return out;
}

void write_noise_split(const std::filesystem::path& path, const NoiseToyBatch& batch) {
    const std::size_t md = batch.tokens_per_task * batch.width;
    std::vector<std::string> payloads;
    payloads.reserve(batch.batch);
    for (std::size_t i = 0; i < batch.batch; ++i) {
        std::string p;
        p.reserve((8 + 3 * md) * 4 + 2);
        for (std::size_t j = 0; j < 8; ++j)
            put_f32(p, static_cast<float>(batch.z.values()[i * 8 + j]));
        for (const Tensor* t : {&batch.task1_tokens, &batch.task2_tokens, &batch.task3_tokens})
            for (std::size_t j = 0; j < md; ++j)
                put_f32(p, static_cast<float>(t->values()[i * md + j]));
        p.push_back(static_cast<char>(batch.labels1[i]));
        p.push_back(static_cast<char>(batch.labels2[i]));
        payloads.push_back(std::move(p));
    }
    write_records(path, payloads);
}

NoiseToyBatch read_noise_split(const std::filesystem::path& path, std::size_t m, std::size_t d) {
    const std::size_t md = m * d;
    const std::size_t expected = (8 + 3 * md) * 4 + 2;

    std::vector<double> z, t1, t2, t3;
    std::vector<int> l1, l2;
    RecordReader reader(path);
    std::string payload;
    while (reader.next(payload)) {
        if (payload.size() != expected)
            throw std::runtime_error("noise record has " + std::to_string(payload.size()) +
                                     " bytes, expected " + std::to_string(expected));
        const char* p = payload.data();
        for (std::size_t j = 0; j < 8; ++j) {
            z.push_back(RecordReader::f32(p));
            p += 4;
        }
        for (std::vector<double>* dst : {&t1, &t2, &t3})
            for (std::size_t j = 0; j < md; ++j) {
                dst->push_back(RecordReader::f32(p));
                p += 4;
            }
        l1.push_back(static_cast<int>(static_cast<unsigned char>(*p++)));
        l2.push_back(static_cast<int>(static_cast<unsigned char>(*p++)));
    }

    NoiseToyBatch out;
    out.batch = l1.size();
    out.tokens_per_task = m;
    out.width = d;
    if (out.batch == 0) throw std::runtime_error("noise split is empty");
    out.z = Tensor::from_data({out.batch, 8}, std::move(z));
    out.task1_tokens = Tensor::from_data({out.batch, m, d}, std::move(t1));
    out.task2_tokens = Tensor::from_data({out.batch, m, d}, std::move(t2));
    out.task3_tokens = Tensor::from_data({out.batch, m, d}, std::move(t3));
    out.labels1 = std::move(l1);
    out.labels2 = std::move(l2);
    return out;
}

void write_dataset_manifest(const std::filesystem::path& path, std::uint64_t seed,
                            const std::vector<std::pair<std::string, std::size_t>>& split_counts,
                            const std::optional<ImbalanceSpec>& imbalance) {
    nlohmann::json j;
    j["seed"] = seed;
    for (const auto& [name, count] : split_counts) j["splits"][name] = count;
    if (imbalance) {
        j["imbalance"]["exponent"] = imbalance->exponent;
        j["imbalance"]["axis"] = "question-color";
    } else {
        j["imbalance"] = nullptr;
    }
    j["record_format"] = {
        {"byte_order", "little-endian"},
        {"framing", "u32 length prefix per record"},
        {"clevr_payload", "image 64*64*3 f32 (y,x,c); 6x(color u8, shape u8, cx f32, cy f32); "
                          "question 11 u8; answer u8"},
        {"noise_payload",
         "z 8 f32; task1 m*d f32; task2 m*d f32; task3 m*d f32; label1 u8; label2 u8"},
    };
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path.string());
    out << j.dump(2) << "\n";
}

} // namespace kem
