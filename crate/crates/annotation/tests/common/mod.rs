#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::Path;

use qarsmith_annotate::{AnnotationService, ServiceConfig};
use qarsmith_core::model::{QarInstance, ReferenceMode};
use qarsmith_core::store::Store;

pub fn instance(i: usize) -> QarInstance {
    QarInstance {
        instance_id: format!("img{:03}-id-r1-t{}", i / 3, i % 3 + 1),
        image_id: format!("img{:03}", i / 3),
        mode: ReferenceMode::IdBased,
        question: format!("Why is [{}] standing near the door?", i % 4),
        answer: "They are waiting for a friend.".into(),
        rationale: "Their coat is on and they keep looking outside.".into(),
        mentioned_ids: BTreeSet::from([(i % 4) as u32]),
        generation_round: 1,
        turn: (i % 3 + 1) as u32,
        raw_llm_text: String::new(),
    }
}

pub fn write_renders(root: &Path, instances: &[QarInstance]) {
    let dir = root.join("renders");
    std::fs::create_dir_all(&dir).unwrap();
    for inst in instances {
        std::fs::write(dir.join(format!("{}.png", inst.instance_id)), b"\x89PNG fake").unwrap();
    }
}

pub fn service(root: &Path) -> AnnotationService {
    let store = Store::open_or_create(root, "test", 7, "digest").unwrap();
    AnnotationService::open(store, ServiceConfig::default()).unwrap()
}
