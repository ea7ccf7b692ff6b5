use bevlocate_py::{gray_from_rows, rows_from_scores, scores};

#[test]
fn nested_rows_round_trip() {
    let rows = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]];
    let img = gray_from_rows(&rows).unwrap();
    assert_eq!((img.rows, img.cols), (2, 3));
    assert_eq!(img.data, rows.concat());
}

#[test]
fn ragged_rows_rejected() {
    assert!(gray_from_rows(&[vec![1.0, 2.0], vec![3.0]]).is_err());
}

#[test]
fn fast_and_reference_scores_agree() {
    let region: Vec<Vec<f64>> = (0..12)
        .map(|r| {
            (0..15)
                .map(|c| ((r * 7 + c * 3) % 11) as f64 / 11.0 + (r as f64 * c as f64).sin())
                .collect()
        })
        .collect();
    let template: Vec<Vec<f64>> = region[3..8].iter().map(|row| row[4..10].to_vec()).collect();
    let fast = scores(&template, &region, true).unwrap();
    let slow = scores(&template, &region, false).unwrap();
    assert_eq!(fast.argmax().0, 3);
    assert_eq!(fast.argmax().1, 4);
    for (a, b) in rows_from_scores(&fast).concat().iter().zip(&slow.data) {
        assert!((a - b).abs() < 1e-9);
    }
}
