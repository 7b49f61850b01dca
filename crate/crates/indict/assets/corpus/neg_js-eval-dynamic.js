function compute(req) {
  return JSON.parse(req.body.expression);
}
