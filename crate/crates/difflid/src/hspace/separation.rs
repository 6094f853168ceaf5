//! Cluster-separation scores for bottleneck features: how strongly features
//! group by image content, and how strongly by hazy/clean domain.

use crate::diffusion::{DenoiserUnet, NoiseSchedule};
use crate::error::{Error, Result};
use crate::hazegen::ScenePair;
use crate::hspace::{extract_batch, Domain, HFeature};
use crate::Real;

/// Separation scores at one timestep.
#[derive(Clone, Debug)]
pub struct SeparationReport {
    pub t: usize,
    /// Silhouette score with image identity as the cluster label.
    pub content_score: Real,
    /// Silhouette score with hazy/clean as the cluster label.
    pub domain_score: Real,
    /// For each image id with both domains present: Euclidean distance
    /// between its clean and hazy feature centroids.
    pub pair_centroid_distances: Vec<(u32, Real)>,
}

fn euclidean(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<Real>().sqrt()
}

/// Mean silhouette coefficient over all points. Labels partition the points
/// into clusters; distances are Euclidean. Points in singleton clusters and
/// points whose intra- and inter-cluster distances both vanish score 0.
pub fn silhouette(points: &[Vec<Real>], labels: &[usize]) -> Result<Real> {
    if points.len() != labels.len() || points.is_empty() {
        return Err(Error::contract(
            "silhouette",
            format!("{} points but {} labels", points.len(), labels.len()),
        ));
    }
    let mut clusters: Vec<usize> = labels.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    if clusters.len() < 2 {
        return Err(Error::contract(
            "silhouette",
            "fewer than two clusters: silhouette is undefined",
        ));
    }
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        let own = labels[i];
        let own_size = labels.iter().filter(|&&l| l == own).count();
        if own_size == 1 {
            continue; // Convention: singleton clusters contribute 0.
        }
        let mut a = 0.0;
        for j in 0..n {
            if j != i && labels[j] == own {
                a += euclidean(&points[i], &points[j]);
            }
        }
        a /= (own_size - 1) as Real;
        let mut b = Real::INFINITY;
        for &other in &clusters {
            if other == own {
                continue;
            }
            let mut sum = 0.0;
            let mut count = 0;
            for j in 0..n {
                if labels[j] == other {
                    sum += euclidean(&points[i], &points[j]);
                    count += 1;
                }
            }
            b = b.min(sum / count as Real);
        }
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        } // Both distances zero: contributes 0.
    }
    Ok(total / n as Real)
}

/// Compute content and domain separation for a set of features taken at one
/// timestep. Requires at least two image identities and both domains.
pub fn separation_metrics(features: &[HFeature]) -> Result<SeparationReport> {
    if features.len() < 2 {
        return Err(Error::contract("separation_metrics", "need at least two features"));
    }
    let t = features[0].t;
    if features.iter().any(|f| f.t != t) {
        return Err(Error::contract(
            "separation_metrics",
            "features mix timesteps; score one t at a time",
        ));
    }
    let mut ids: Vec<u32> = features.iter().map(|f| f.image_id).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::contract("separation_metrics", "need at least two image identities"));
    }
    if !features.iter().any(|f| f.domain == Domain::Clean)
        || !features.iter().any(|f| f.domain == Domain::Hazy)
    {
        return Err(Error::contract(
            "separation_metrics",
            "need features from both the clean and the hazy domain",
        ));
    }
    let points: Vec<Vec<Real>> = features.iter().map(|f| f.feature.data().to_vec()).collect();
    let content_labels: Vec<usize> = features
        .iter()
        .map(|f| ids.binary_search(&f.image_id).expect("id indexed above"))
        .collect();
    let domain_labels: Vec<usize> =
        features.iter().map(|f| usize::from(f.domain == Domain::Hazy)).collect();
    let content_score = silhouette(&points, &content_labels)?;
    let domain_score = silhouette(&points, &domain_labels)?;

    let mut pair_centroid_distances = Vec::new();
    for &id in &ids {
        let centroid = |dom: Domain| -> Option<Vec<Real>> {
            let members: Vec<&Vec<Real>> = features
                .iter()
                .zip(&points)
                .filter(|(f, _)| f.image_id == id && f.domain == dom)
                .map(|(_, p)| p)
                .collect();
            if members.is_empty() {
                return None;
            }
            let dim = members[0].len();
            let mut c = vec![0.0; dim];
            for m in &members {
                for (acc, v) in c.iter_mut().zip(m.iter()) {
                    *acc += v;
                }
            }
            for v in c.iter_mut() {
                *v /= members.len() as Real;
            }
            Some(c)
        };
        if let (Some(c), Some(h)) = (centroid(Domain::Clean), centroid(Domain::Hazy)) {
            pair_centroid_distances.push((id, euclidean(&c, &h)));
        }
    }
    Ok(SeparationReport { t, content_score, domain_score, pair_centroid_distances })
}

/// The timesteps a sweep visits by default: endpoints plus a spread around
/// the middle of the schedule.
pub fn default_t_list(t_steps: usize) -> Vec<usize> {
    let mut list = vec![
        0,
        t_steps / 10,
        t_steps / 4,
        t_steps / 2,
        3 * t_steps / 4,
        9 * t_steps / 10,
        t_steps,
    ];
    list.sort_unstable();
    list.dedup();
    list
}

/// Extract features for every scene pair at each timestep in `t_list` (one
/// shared noise realization per t) and score their separation.
pub fn sweep_timesteps(
    net: &DenoiserUnet,
    sched: &NoiseSchedule,
    pairs: &[ScenePair],
    t_list: &[usize],
    eps_seed: u64,
) -> Result<Vec<SeparationReport>> {
    if pairs.len() < 2 {
        return Err(Error::contract("sweep_timesteps", "need at least two scene pairs"));
    }
    let mut reports = Vec::with_capacity(t_list.len());
    for &t in t_list {
        let mut batch: Vec<(&crate::tensor::Tensor, u32, Domain)> = Vec::new();
        for p in pairs {
            batch.push((&p.clean, p.image_id, Domain::Clean));
            batch.push((&p.hazy, p.image_id, Domain::Hazy));
        }
        let features = extract_batch(net, sched, &batch, t, eps_seed)?;
        reports.push(separation_metrics(&features)?);
    }
    Ok(reports)
}

/// CSV rendering of sweep results: `t,content_score,domain_score`.
pub fn sweep_csv(reports: &[SeparationReport]) -> String {
    let mut out = String::from("t,content_score,domain_score\n");
    for r in reports {
        out.push_str(&format!("{},{},{}\n", r.t, r.content_score, r.domain_score));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn feat(vals: &[Real], t: usize, image_id: u32, domain: Domain) -> HFeature {
        HFeature {
            feature: Tensor::from_vec(&[vals.len()], vals.to_vec()).unwrap(),
            t,
            image_id,
            domain,
        }
    }

    #[test]
    fn hand_computed_four_point_silhouette() {
        // Points {0, 0.1} labeled A and {1, 1.1} labeled B.
        // s(0)   = (1.05-0.1)/1.05 ; s(0.1) = (0.95-0.1)/0.95
        // s(1)   = (0.95-0.1)/0.95 ; s(1.1) = (1.05-0.1)/1.05
        // mean  = 0.899749373433584
        let points = vec![vec![0.0], vec![0.1], vec![1.0], vec![1.1]];
        let labels = vec![0, 0, 1, 1];
        let s = silhouette(&points, &labels).unwrap();
        assert!((s - 0.899749373433584).abs() < 1e-12, "{s}");
    }

    #[test]
    fn well_separated_clusters_score_above_09_and_identical_points_score_zero() {
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for i in 0..4 {
            points.push(vec![0.0 + 0.01 * i as Real, 0.0]);
            labels.push(0);
            points.push(vec![100.0 + 0.01 * i as Real, 0.0]);
            labels.push(1);
        }
        assert!(silhouette(&points, &labels).unwrap() > 0.9);
        let same = vec![vec![1.0, 2.0]; 6];
        let lab = vec![0, 0, 0, 1, 1, 1];
        assert_eq!(silhouette(&same, &lab).unwrap(), 0.0);
    }

    #[test]
    fn silhouette_stays_in_range_even_for_bad_labelings() {
        // Interleaved clusters: score should be negative but >= -1.
        let points: Vec<Vec<Real>> = (0..8).map(|i| vec![i as Real]).collect();
        let labels = vec![0, 1, 0, 1, 0, 1, 0, 1];
        let s = silhouette(&points, &labels).unwrap();
        assert!((-1.0..=1.0).contains(&s));
        assert!(s < 0.5);
    }

    #[test]
    fn single_cluster_is_rejected() {
        let points = vec![vec![0.0], vec![1.0]];
        assert!(silhouette(&points, &[0, 0]).is_err());
    }

    #[test]
    fn separation_requires_same_t_both_domains_and_two_identities() {
        let ok = vec![
            feat(&[0.0], 1, 0, Domain::Clean),
            feat(&[0.1], 1, 0, Domain::Hazy),
            feat(&[1.0], 1, 1, Domain::Clean),
            feat(&[1.1], 1, 1, Domain::Hazy),
        ];
        let report = separation_metrics(&ok).unwrap();
        assert!((-1.0..=1.0).contains(&report.content_score));
        assert!((-1.0..=1.0).contains(&report.domain_score));
        assert_eq!(report.pair_centroid_distances.len(), 2);
        assert!((report.pair_centroid_distances[0].1 - 0.1).abs() < 1e-12);

        let mixed_t = vec![ok[0].clone(), feat(&[0.1], 2, 1, Domain::Hazy)];
        assert!(separation_metrics(&mixed_t).is_err());
        let one_id = vec![ok[0].clone(), ok[1].clone()];
        assert!(separation_metrics(&one_id).is_err());
        let one_domain = vec![ok[0].clone(), ok[2].clone()];
        assert!(separation_metrics(&one_domain).is_err());
    }

    #[test]
    fn content_clusters_dominate_when_pairs_sit_together() {
        // Two scenes far apart, hazy/clean versions adjacent: content high,
        // domain near zero or negative.
        let feats = vec![
            feat(&[0.0, 0.0], 3, 0, Domain::Clean),
            feat(&[0.2, 0.0], 3, 0, Domain::Hazy),
            feat(&[10.0, 0.0], 3, 1, Domain::Clean),
            feat(&[10.2, 0.0], 3, 1, Domain::Hazy),
        ];
        let r = separation_metrics(&feats).unwrap();
        assert!(r.content_score > 0.9, "{}", r.content_score);
        assert!(r.domain_score < 0.1, "{}", r.domain_score);
    }

    #[test]
    fn domain_clusters_dominate_when_domains_split() {
        let feats = vec![
            feat(&[0.0, 0.0], 3, 0, Domain::Clean),
            feat(&[0.2, 0.0], 3, 1, Domain::Clean),
            feat(&[10.0, 0.0], 3, 0, Domain::Hazy),
            feat(&[10.2, 0.0], 3, 1, Domain::Hazy),
        ];
        let r = separation_metrics(&feats).unwrap();
        assert!(r.domain_score > 0.9, "{}", r.domain_score);
        assert!(r.content_score < 0.1, "{}", r.content_score);
    }

    #[test]
    fn default_t_list_spans_the_schedule() {
        assert_eq!(default_t_list(100), vec![0, 10, 25, 50, 75, 90, 100]);
        assert_eq!(default_t_list(4), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn sweep_csv_has_expected_shape() {
        let reports = vec![SeparationReport {
            t: 5,
            content_score: 0.5,
            domain_score: -0.25,
            pair_centroid_distances: vec![],
        }];
        let csv = sweep_csv(&reports);
        assert_eq!(csv, "t,content_score,domain_score\n5,0.5,-0.25\n");
    }
}
