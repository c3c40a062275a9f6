//! Library surface of the experiment CLI (placeholder while building).
