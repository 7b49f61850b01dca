function makeHandler(body) {
  return new Function("event", body);
}
