use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{AdStudy, EvidenceError, IpdStudy, Result, Treatment, TreatmentId};

/// Treatments plus the canonicalized studies that compare them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub treatments: Vec<Treatment>,
    pub ad_studies: Vec<AdStudy>,
    pub ipd_studies: Vec<IpdStudy>,
    /// Compared pairs `(k, l)` with `k < l`.
    pub contrasts: BTreeSet<(TreatmentId, TreatmentId)>,
}

impl Network {
    pub fn n_treatments(&self) -> usize {
        self.treatments.len()
    }

    pub fn n_studies(&self) -> usize {
        self.ad_studies.len() + self.ipd_studies.len()
    }

    pub fn treatment(&self, id: TreatmentId) -> Option<&Treatment> {
        self.treatments.iter().find(|t| t.id == id)
    }

    pub fn label(&self, id: TreatmentId) -> &str {
        self.treatment(id).map_or("?", |t| t.class_tag.as_str())
    }

    /// Every pair `(k, l)` with `k < l`, in lexical order.
    pub fn all_pairs(&self) -> Vec<(TreatmentId, TreatmentId)> {
        let n = self.n_treatments();
        (1..=n)
            .flat_map(|k| ((k + 1)..=n).map(move |l| (TreatmentId(k), TreatmentId(l))))
            .collect()
    }
}

fn check_treatments(treatments: &[Treatment]) -> Result<()> {
    let mut ids: Vec<usize> = treatments.iter().map(|t| t.id.0).collect();
    ids.sort_unstable();
    let dense = ids.iter().enumerate().all(|(i, &id)| id == i + 1);
    if ids.is_empty() || !dense {
        return Err(EvidenceError::TreatmentIds(format!("{ids:?}")));
    }
    Ok(())
}

/// Canonicalizes and sorts the studies, enumerates contrasts and verifies the
/// comparison graph is connected.
pub fn build_network(
    treatments: Vec<Treatment>,
    ad_studies: Vec<AdStudy>,
    ipd_studies: Vec<IpdStudy>,
) -> Result<Network> {
    check_treatments(&treatments)?;
    let mut treatments = treatments;
    treatments.sort_by_key(|t| t.id);
    let n = treatments.len();
    let declared = |id: TreatmentId, study: &str| {
        if id.0 == 0 || id.0 > n {
            Err(EvidenceError::Study {
                study: study.to_string(),
                message: format!("treatment id {id} not declared"),
            })
        } else {
            Ok(())
        }
    };

    let mut ad: Vec<AdStudy> = Vec::with_capacity(ad_studies.len());
    for s in ad_studies {
        declared(s.treatment_k, &s.study_id)?;
        declared(s.treatment_l, &s.study_id)?;
        s.validate()?;
        ad.push(s.canonical());
    }
    let mut ipd: Vec<IpdStudy> = Vec::with_capacity(ipd_studies.len());
    for s in ipd_studies {
        declared(s.treatment_k, &s.study_id)?;
        declared(s.treatment_l, &s.study_id)?;
        s.validate()?;
        ipd.push(s.canonical());
    }
    ad.sort_by(|a, b| {
        (&a.study_id, a.treatment_k, a.treatment_l)
            .cmp(&(&b.study_id, b.treatment_k, b.treatment_l))
            .then(a.y.total_cmp(&b.y))
            .then(a.sigma.total_cmp(&b.sigma))
            .then(a.ppos.total_cmp(&b.ppos))
    });
    ipd.sort_by(|a, b| {
        (&a.study_id, a.treatment_k, a.treatment_l).cmp(&(&b.study_id, b.treatment_k, b.treatment_l))
    });

    let contrasts: BTreeSet<_> = ad
        .iter()
        .map(|s| (s.treatment_k, s.treatment_l))
        .chain(ipd.iter().map(|s| (s.treatment_k, s.treatment_l)))
        .collect();

    let components = connected_components(n, &contrasts);
    if components.len() > 1 {
        let named = components
            .into_iter()
            .map(|c| c.into_iter().map(|i| treatments[i].class_tag.clone()).collect())
            .collect();
        return Err(EvidenceError::Disconnected(named));
    }

    Ok(Network {
        treatments,
        ad_studies: ad,
        ipd_studies: ipd,
        contrasts,
    })
}

fn connected_components(n: usize, edges: &BTreeSet<(TreatmentId, TreatmentId)>) -> Vec<Vec<usize>> {
    let mut adjacency = vec![Vec::new(); n];
    for &(k, l) in edges {
        adjacency[k.index()].push(l.index());
        adjacency[l.index()].push(k.index());
    }
    let mut seen = vec![false; n];
    let mut components = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        let mut stack = vec![start];
        let mut component = Vec::new();
        seen[start] = true;
        while let Some(v) = stack.pop() {
            component.push(v);
            for &w in &adjacency[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        component.sort_unstable();
        components.push(component);
    }
    components
}
