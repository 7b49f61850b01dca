function findUser(db, id) {
  return db.query("SELECT name FROM users WHERE id = ?", [id]);
}
