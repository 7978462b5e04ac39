use super::{Result, TrainingError};

fn split_classes(labels: &[f64]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&y| y > 0.5).count();
    (pos, labels.len() - pos)
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half (Mann–Whitney U over average ranks).
pub fn auroc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(TrainingError::Metric("scores and labels differ in length".into()));
    }
    let (pos, neg) = split_classes(labels);
    if pos == 0 || neg == 0 {
        return Err(TrainingError::Metric("AUROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mean_rank = (i + j + 2) as f64 / 2.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k] > 0.5).count();
        rank_sum += mean_rank * tied_pos as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Mean of precision@k over the ranks k of the positives, in descending score
/// order with ties kept in input order.
pub fn average_precision(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(TrainingError::Metric("scores and labels differ in length".into()));
    }
    let (pos, _) = split_classes(labels);
    if pos == 0 {
        return Err(TrainingError::Metric("average precision needs a positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // + 0.0 folds -0.0 into +0.0 so equal scores stay tied
    order.sort_by(|&a, &b| (scores[b] + 0.0).total_cmp(&(scores[a] + 0.0)));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (k, &i) in order.iter().enumerate() {
        if labels[i] > 0.5 {
            hits += 1;
            total += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(total / pos as f64)
}

/// Mean AUROC over the columns of a `[rows × tasks]` block, skipping missing
/// labels and tasks where one class is absent.
pub fn mean_task_auroc(scores: &[f64], labels: &[f64], tasks: usize) -> Result<f64> {
    let mut sum = 0.0;
    let mut used = 0;
    for t in 0..tasks {
        let (s, y): (Vec<f64>, Vec<f64>) = scores
            .iter()
            .zip(labels)
            .skip(t)
            .step_by(tasks)
            .filter(|(_, y)| y.is_finite())
            .map(|(&s, &y)| (s, y))
            .unzip();
        if let Ok(a) = auroc(&s, &y) {
            sum += a;
            used += 1;
        }
    }
    if used == 0 {
        return Err(TrainingError::Metric("no task has both classes".into()));
    }
    Ok(sum / used as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_cases() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[0.0, 0.0, 1.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &[0.0, 0.0, 1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[0.0, 0.0, 1.0, 1.0]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.5, 0.5], &[0.0, 1.0]).unwrap(), 0.5);
        assert!(auroc(&[0.1, 0.2], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn ap_cases() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[1.0, 1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.2, 0.9], &[1.0, 0.0]).unwrap(), 0.5);
        assert!(average_precision(&[0.2, 0.9], &[0.0, 0.0]).is_err());
        // signed zeros tie, so input order decides
        assert_eq!(average_precision(&[0.0, -0.0], &[0.0, 1.0]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.0, -0.0], &[0.0, 1.0]).unwrap(), 0.5);
    }

    #[test]
    fn per_task_mean_skips_single_class_tasks() {
        let scores = [0.1, 0.9, 0.8, 0.2, 0.3, 0.5];
        let labels = [0.0, 1.0, 1.0, 1.0, 0.0, 1.0];
        // task 0: scores [0.1, 0.8, 0.3] labels [0, 1, 0] -> 1; task 1 has one class
        assert_eq!(mean_task_auroc(&scores, &labels, 2).unwrap(), 1.0);
    }
}
