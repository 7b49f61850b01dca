function compute(req) {
  return eval(req.body.expression);
}
