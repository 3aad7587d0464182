#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "wbm/data.hpp"

namespace wbm::io {

// Shortest round-trip decimal form, locale independent.
std::string format_double(double v);

// Writes to <path>.tmp then renames, so readers never observe partial files.
void atomic_write(const std::filesystem::path& path, const std::string& bytes);

std::string read_file(const std::filesystem::path& path);

// --- measurement CSV: header `subject_id,absolute_hour,variable_id,value` ---
std::string measurements_to_csv(const std::vector<MeasurementTuple>& rows);
std::vector<MeasurementTuple> measurements_from_csv(const std::string& text);

// --- labels CSV: header `subject_id,age,sex,week_index,event_flag` ---
std::string labels_to_csv(const LabelSet& labels);
LabelSet labels_from_csv(const std::string& text);

// --- split CSV: header `subject_id,split` with split in {train,val,test} ---
struct SplitAssignment {
  std::vector<std::uint64_t> train, val, test;
};
std::string splits_to_csv(const SplitAssignment& s);
SplitAssignment splits_from_csv(const std::string& text);

// --- grid binary (magic "WBMG", version 1) -------------------------------
// Records until EOF: subject_id u64, week_index i32, 168*27 f32 values
// (hour-major), 168*27 mask bytes. All integers and floats little-endian.
std::string grids_to_bytes(const std::vector<WeekGrid>& grids);
std::vector<WeekGrid> grids_from_bytes(const std::string& bytes);

// --- embedding binary (magic "WBME", version 1) --------------------------
struct EmbeddingRecord {
  std::uint64_t subject_id = 0;
  std::int32_t week_index = 0;
  std::vector<float> vector;
};
std::string embeddings_to_bytes(const std::vector<EmbeddingRecord>& records, int dim);
std::vector<EmbeddingRecord> embeddings_from_bytes(const std::string& bytes, int* dim_out = nullptr);

}  // namespace wbm::io
