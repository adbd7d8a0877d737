mod common;

use common::*;

#[test]
fn iou_matches_pixel_count() {
    check_iou(101, ORACLE_CASES).unwrap();
}

#[test]
fn secondary_filter_matches_exhaustive_ranking() {
    check_filter(102, ORACLE_CASES).unwrap();
}

#[test]
fn roi_pool_matches_full_scan() {
    check_roi_pool(103, ORACLE_CASES).unwrap();
}

#[test]
fn max_pool_matches_window_scan() {
    check_max_pool(104, ORACLE_CASES).unwrap();
}

#[test]
fn conv_matches_direct_sum() {
    check_conv(105, ORACLE_CASES).unwrap();
}
