#pragma once

#include <string>

#include "mixconv/network.hpp"

namespace mixconv {

// RPMK checkpoint: magic "RPMK", u8 format version, length-prefixed JSON
// architecture descriptor, then one record per parameter group (name,
// dtype code, shape, raw little-endian data), then the stored-gate section
// (present when gates have been captured for replay). Round-trips are
// bit-exact.
void save_checkpoint(const std::string& path, NetworkParams<float>& params);
void save_checkpoint(const std::string& path, NetworkParams<double>& params);

// Peek at the payload dtype: 1 = f32, 2 = f64.
int checkpoint_dtype(const std::string& path);

// Rebuild the network from the descriptor and load every group; the file's
// dtype must match T.
template <class T>
NetworkParams<T> load_checkpoint(const std::string& path);

extern template NetworkParams<float> load_checkpoint<float>(const std::string&);
extern template NetworkParams<double> load_checkpoint<double>(const std::string&);

// Descriptor (de)serialization, shared with anything that needs to print or
// compare architectures.
std::string arch_to_json(const ArchConfig& arch, bool frozen_base,
                         int frozen_expert_count, int dtype_code);
void arch_from_json(const std::string& text, ArchConfig& arch, bool& frozen_base,
                    int& frozen_expert_count, int& dtype_code);

}  // namespace mixconv
