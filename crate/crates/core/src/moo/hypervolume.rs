/// Volume dominated by `points` and bounded by `reference` (minimization).
/// Points not strictly better than the reference on every axis contribute
/// nothing. Exact, by slicing along the last axis.
pub fn hypervolume(points: &[Vec<f64>], reference: &[f64]) -> f64 {
    let inside: Vec<&[f64]> = points
        .iter()
        .map(Vec::as_slice)
        .filter(|p| p.iter().zip(reference).all(|(x, r)| x < r))
        .collect();
    slice(&inside, reference)
}

fn slice(points: &[&[f64]], reference: &[f64]) -> f64 {
    let d = reference.len();
    if points.is_empty() {
        return 0.0;
    }
    if d == 1 {
        let best = points.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
        return reference[0] - best;
    }
    let mut sorted: Vec<&[f64]> = points.to_vec();
    sorted.sort_by(|a, b| a[d - 1].total_cmp(&b[d - 1]));
    let mut volume = 0.0;
    for i in 0..sorted.len() {
        let top = sorted.get(i + 1).map_or(reference[d - 1], |p| p[d - 1]);
        let height = top - sorted[i][d - 1];
        if height > 0.0 {
            let below: Vec<&[f64]> = sorted[..=i].iter().map(|p| &p[..d - 1]).collect();
            volume += height * slice(&below, &reference[..d - 1]);
        }
    }
    volume
}
