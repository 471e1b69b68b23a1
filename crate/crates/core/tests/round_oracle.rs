#[path = "support/round_oracle.rs"]
mod oracle;

#[test]
fn one_round_matches_straight_line_oracle() {
    oracle::check_one_round();
}
