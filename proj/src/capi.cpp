// Copyright (c) 2026 sphere-lab contributors
// SPDX-License-Identifier: Apache-2.0
