#pragma once

#include "anchorfuse/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace anchorfuse {

// ---------------------------------------------------------------------------
// Vocabulary
//
// 48 class words followed by 16 function/descriptor words; a word's token id
// is its index. The padding token is the first non-class word.
// ---------------------------------------------------------------------------

inline constexpr std::size_t kClassWordCount = 48;
inline constexpr std::size_t kLexiconSize = 64;

const std::vector<std::string>& lexicon();
int token_id(std::string_view word);
int pad_token_id();
// Whitespace tokenization; unknown words throw Error(invalid_argument).
std::vector<int> tokenize(std::string_view text);

enum class TemplateCategory { minimal, article, generic, abstract, extreme };

const char* category_name(TemplateCategory category);
TemplateCategory parse_template_category(std::string_view name);

struct PromptTemplate {
    std::string pattern; // contains "{c}", or is empty for the extreme category
    TemplateCategory category = TemplateCategory::minimal;

    static PromptTemplate of(TemplateCategory category);
};

// The five robustness templates, mildest first.
std::vector<PromptTemplate> robustness_templates();

// Substitutes the class name into a pattern and tokenizes.
std::vector<int> expand_pattern(std::string_view pattern, std::string_view class_name);
// As expand_pattern; the extreme (empty) template yields a single pad token.
std::vector<int> expand_template(const PromptTemplate& prompt, std::string_view class_name);

// ---------------------------------------------------------------------------
// Synthetic tasks
// ---------------------------------------------------------------------------

struct SyntheticTaskSpec {
    int classes = 8;
    int k_max = 16;
    int queries_per_class = 32;
    int image_size = 16;
    double noise_std = 0.06;
    int template_pool_size = 10;
    double base_fraction = 0.5;
    std::uint64_t seed = 0;

    void validate() const;
};

// Latent attributes of a class pattern; each maps onto one descriptor word.
struct LatentPattern {
    bool bright = false;     // blob sign
    bool fine = false;       // grating frequency
    bool horizontal = false; // grating orientation
    bool central = false;    // blob location
    double phase = 0.0;
    double blob_row = 0.0;
    double blob_col = 0.0;

    std::vector<std::string> descriptors() const;
};

struct LabeledImage {
    Tensor pixels; // 1 x image_size^2, row-major
    int label = 0;
    int index = 0; // global sample index within the task
};

struct FewShotTask {
    SyntheticTaskSpec spec;
    std::vector<std::string> class_names;
    std::vector<LatentPattern> patterns;
    std::vector<Tensor> prototypes;
    std::vector<std::vector<LabeledImage>> support; // [class][shot], k_max shots each
    std::vector<LabeledImage> query;
    std::vector<std::vector<std::string>> expert_templates; // [class] -> patterns with "{c}"
    std::vector<int> base_classes;
    std::vector<int> novel_classes;

    int class_count() const { return static_cast<int>(class_names.size()); }
    // First `k` support images of class `c`; throws when fewer exist.
    std::vector<Tensor> support_images(int c, int k) const;
};

FewShotTask generate_task(const SyntheticTaskSpec& spec);

// Seeded permutation; the first ceil(C * base_fraction) entries are base.
// Both halves are returned sorted.
std::pair<std::vector<int>, std::vector<int>> base_novel_split(int classes, std::uint64_t seed,
                                                               double base_fraction = 0.5);

// Task directory layout:
//   images.bin   all support images (class-major) then all queries, float64 little-endian
//   images.json  {"shape": [N, S*S], "dtype": "float64", "byte_order": "little", "seed": ..., "image_size": S}
//   task.json    spec, class names, sample index/label lists, templates, base/novel split
void write_task(const FewShotTask& task, const std::filesystem::path& dir);
FewShotTask read_task(const std::filesystem::path& dir);

} // namespace anchorfuse
