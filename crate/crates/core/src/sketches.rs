//! Bundled programs and sketches.

/// Bubble sort with its example call `2 4 2 7 4 SORT`.
pub const BUBBLE: &str = include_str!("../sketches/bubble.d4");
/// Bubble sort whose input is pushed by the caller.
pub const SORT_REFERENCE: &str = include_str!("../sketches/sort_reference.d4");
pub const SORT_PERMUTE: &str = include_str!("../sketches/sort_permute.d4");
pub const SORT_COMPARE: &str = include_str!("../sketches/sort_compare.d4");
pub const ADD_REFERENCE: &str = include_str!("../sketches/add_reference.d4");
pub const ADD_MANIPULATE: &str = include_str!("../sketches/add_manipulate.d4");
pub const ADD_CHOOSE: &str = include_str!("../sketches/add_choose.d4");
pub const WAP: &str = include_str!("../sketches/wap.d4");
pub const HALT: &str = include_str!("../sketches/halt.d4");

/// Look up a bundled source by short name (`sort-compare`, `add-choose`, ...).
pub fn by_name(name: &str) -> Option<&'static str> {
    Some(match name {
        "bubble" => BUBBLE,
        "sort-reference" => SORT_REFERENCE,
        "sort-permute" => SORT_PERMUTE,
        "sort-compare" => SORT_COMPARE,
        "add-reference" => ADD_REFERENCE,
        "add-manipulate" => ADD_MANIPULATE,
        "add-choose" => ADD_CHOOSE,
        "wap" => WAP,
        "halt" => HALT,
        _ => return None,
    })
}

pub const NAMES: &[&str] = &[
    "bubble",
    "sort-reference",
    "sort-permute",
    "sort-compare",
    "add-reference",
    "add-manipulate",
    "add-choose",
    "wap",
    "halt",
];
