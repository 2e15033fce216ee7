use crate::model::{BoundingBox, Detection, FrameInterval, Triplet};

/// Index of the best detection of `class` in `frame`, skipping `exclude`.
/// Highest confidence wins, then the larger box, then the earlier record.
fn best(detections: &[Detection], frame: u32, class: &str, exclude: Option<usize>) -> Option<usize> {
    let mut pick: Option<usize> = None;
    for (i, d) in detections.iter().enumerate() {
        if d.frame_index != frame || d.entity_class != class || Some(i) == exclude {
            continue;
        }
        let better = match pick {
            None => true,
            Some(j) => {
                let cur = &detections[j];
                d.confidence > cur.confidence || (d.confidence == cur.confidence && d.bbox.area() > cur.bbox.area())
            }
        };
        if better {
            pick = Some(i);
        }
    }
    pick
}

/// Boxes for a subject and an object of the given classes in `frame`,
/// chosen as in [`ground_triplets`].
pub fn ground_pair(
    detections: &[Detection],
    frame: u32,
    subject_class: &str,
    object_class: &str,
) -> Option<(BoundingBox, BoundingBox)> {
    let s = best(detections, frame, subject_class, None)?;
    let o = best(detections, frame, object_class, Some(s))?;
    Some((detections[s].bbox, detections[o].bbox))
}

/// Localizes each triplet in every frame of `interval` where both its
/// subject and object classes are detected. Subject and object never
/// share a detection. Output is ordered by frame, then input order.
pub fn ground_triplets(triplets: &[Triplet], interval: FrameInterval, detections: &[Detection]) -> Vec<Triplet> {
    let mut out = Vec::new();
    for frame in interval.frames() {
        for t in triplets {
            if let Some((s, o)) = ground_pair(detections, frame, &t.subject_class, &t.object_class) {
                out.push(t.clone().localized(frame, s, o));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BoundingBox, Provenance};

    fn det(frame: u32, class: &str, b: [f64; 4], conf: f64) -> Detection {
        Detection {
            frame_index: frame,
            entity_class: class.into(),
            bbox: BoundingBox::new(b[0], b[1], b[2], b[3]).unwrap(),
            confidence: conf,
        }
    }

    fn carrying() -> Triplet {
        Triplet::unlocalized("person", "carrying", "cup", Provenance::Caption)
    }

    #[test]
    fn both_frames_grounded() {
        let dets = vec![
            det(3, "person", [0.0, 0.0, 10.0, 20.0], 0.9),
            det(3, "cup", [5.0, 5.0, 7.0, 7.0], 0.8),
            det(4, "person", [1.0, 0.0, 11.0, 20.0], 0.9),
            det(4, "cup", [6.0, 5.0, 8.0, 7.0], 0.7),
        ];
        let out = ground_triplets(&[carrying()], FrameInterval::new(3, 4).unwrap(), &dets);
        assert_eq!(out.len(), 2);
        // Exhaustive oracle: every output box is a detection of the right class and frame.
        for t in &out {
            let f = t.frame_index.unwrap();
            assert!(dets
                .iter()
                .any(|d| d.frame_index == f && d.entity_class == "person" && Some(d.bbox) == t.subject_box));
            assert!(dets
                .iter()
                .any(|d| d.frame_index == f && d.entity_class == "cup" && Some(d.bbox) == t.object_box));
        }
    }

    #[test]
    fn missing_object() {
        let dets = vec![det(1, "person", [0.0, 0.0, 10.0, 20.0], 0.9)];
        assert!(ground_triplets(&[carrying()], FrameInterval::single(1).unwrap(), &dets).is_empty());
    }

    #[test]
    fn argmax_and_ties() {
        let dets = vec![
            det(1, "person", [0.0, 0.0, 10.0, 20.0], 0.9),
            det(1, "cup", [0.0, 0.0, 1.0, 1.0], 0.4),
            det(1, "cup", [2.0, 2.0, 3.0, 3.0], 0.9),
            det(1, "cup", [2.0, 2.0, 4.0, 4.0], 0.9),
        ];
        let out = ground_triplets(&[carrying()], FrameInterval::single(1).unwrap(), &dets);
        assert_eq!(out[0].object_box, Some(dets[3].bbox));
    }

    #[test]
    fn same_class_roles_use_distinct_boxes() {
        let dets = vec![
            det(1, "person", [0.0, 0.0, 10.0, 20.0], 0.9),
            det(1, "person", [20.0, 0.0, 30.0, 20.0], 0.6),
        ];
        let t = Triplet::unlocalized("person", "looking at", "person", Provenance::Caption);
        let out = ground_triplets(std::slice::from_ref(&t), FrameInterval::single(1).unwrap(), &dets);
        assert_eq!(out[0].subject_box, Some(dets[0].bbox));
        assert_eq!(out[0].object_box, Some(dets[1].bbox));
        assert!(ground_triplets(&[t], FrameInterval::single(1).unwrap(), &dets[..1]).is_empty());
    }
}
