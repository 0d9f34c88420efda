// Copyright 2026 The nkb-lab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

namespace nkb {

// Special tokens occupy the first vocabulary ids; every vocabulary built by
// build_vocab() places them here, ahead of the lexicographically sorted words.
inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kSentinelId = 3;
inline constexpr int kNumSpecialTokens = 4;

inline constexpr const char* kPadToken = "<pad>";
inline constexpr const char* kBosToken = "<s>";
inline constexpr const char* kEosToken = "</s>";
inline constexpr const char* kSentinelToken = "<X>";

inline bool is_special_token(int id) { return id >= 0 && id < kNumSpecialTokens; }

}  // namespace nkb
