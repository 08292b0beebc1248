//! Command-line surface (to be filled in).
