# scripts/lib - Shared utilities for DiffStereo scripts
